// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef TAPEPROP_TAPEPROP_HPP
#define TAPEPROP_TAPEPROP_HPP

#include "tapeprop/config.hpp"
#include "tapeprop/data_io.hpp"
#include "tapeprop/diagnostics.hpp"
#include "tapeprop/engine.hpp"
#include "tapeprop/errors.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/prelayer.hpp"
#include "tapeprop/quantizer.hpp"
#include "tapeprop/random.hpp"
#include "tapeprop/tensor.hpp"
#include "tapeprop/trainkit.hpp"

#endif  // TAPEPROP_TAPEPROP_HPP
