// Copyright 2026 The mcount Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcc/density_gt.hpp"

namespace mcc {

/// Per-class totals (predicted or ground truth).
using CountVector = std::vector<double>;

struct CountSample {
  CountVector pred;
  CountVector gt;
};

struct CountRange {
  double lo = 0, hi = 0;  // inclusive
};

struct RangeRow {
  double lo = 0, hi = 0;
  std::size_t sample_count = 0;
  std::optional<double> mae;  // absent for empty ranges
  std::optional<double> rmse;
};

struct ClassRow {
  std::string class_name;
  double mae = 0;
  double rmse = 0;
};

struct RangeReport {
  RangeRow overall;
  std::vector<RangeRow> ranges;
  std::vector<ClassRow> per_class;

  bool operator==(const RangeReport&) const;
};

/// Pairwise summation; sequential below 32 terms.
double pairwise_sum(std::span<const double> values);

CountVector class_counts(const DensityMap& map);

/// Mean over classes of |pred - gt| for one sample.
double sample_macro_abs_error(const CountVector& pred, const CountVector& gt);
/// sqrt of the mean over classes of (pred - gt)^2 for one sample.
double sample_macro_rms_error(const CountVector& pred, const CountVector& gt);

double macro_mae(std::span<const CountVector> preds, std::span<const CountVector> gts);
double macro_rmse(std::span<const CountVector> preds, std::span<const CountVector> gts);

/// Samples are bucketed by total ground-truth count (summed over classes).
/// With no ranges only the overall row is filled, spanning the observed totals.
RangeReport bucketed_report(std::span<const CountSample> samples, std::span<const CountRange> ranges);
std::vector<ClassRow> per_class_report(std::span<const CountSample> samples, std::span<const std::string> class_names);

/// "0:10,11:50" -> ranges. Throws ValidationError on bad syntax or overlap.
std::vector<CountRange> parse_ranges(const std::string& text);

nlohmann::json to_json(const RangeReport& report);
RangeReport range_report_from_json(const nlohmann::json& j);
/// Aligned-column text table.
std::string format_report(const RangeReport& report);

}  // namespace mcc
