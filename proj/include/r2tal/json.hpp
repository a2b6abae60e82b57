// Copyright (c) 2026 The r2tal Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single include point for the vendored JSON library.

#pragma once

#include <json.hpp>
