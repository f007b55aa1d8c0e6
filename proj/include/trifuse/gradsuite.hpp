// Copyright 2026 The Trifuse Authors
// Finite-difference verification suite over the op and layer inventory
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace trifuse::gradsuite {

struct CheckResult {
  std::string name;
  /// Max relative error over coordinates whose gradient magnitude rises
  /// above the finite-difference noise floor.
  double max_rel_error = 0.0;
  double threshold = 0.0;
  /// Max |analytic - numeric| over the remaining near-zero-gradient
  /// coordinates, which must agree absolutely.
  double max_abs_error_tiny = 0.0;
  double abs_threshold = 1e-9;
  int instances = 0;

  bool passed() const {
    return max_rel_error < threshold && max_abs_error_tiny < abs_threshold;
  }
};

struct SuiteReport {
  std::vector<CheckResult> results;
  bool all_passed() const;
};

/// Runs central-difference gradient checks (eps 1e-5) for every
/// differentiable op at 1e-6 over `instances_per_op` random instances,
/// every layer type at 1e-6, and the fused model end to end (including
/// the three modality weights) at 1e-5. Coordinates whose true gradient
/// sits at the finite-difference noise floor are held to an absolute
/// 1e-9 agreement instead of the relative threshold.
SuiteReport run_suite(int instances_per_op, std::uint64_t seed);

}  // namespace trifuse::gradsuite
