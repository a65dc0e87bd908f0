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

#include "mcc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mcc/error.hpp"

namespace mcc {

namespace {

void check_pair(const CountVector& pred, const CountVector& gt) {
  if (pred.size() != gt.size() || pred.empty())
    fail_validation("count vectors must be non-empty and of equal length (" + std::to_string(pred.size()) + " vs " +
                    std::to_string(gt.size()) + ")");
}

void check_lists(std::span<const CountVector> preds, std::span<const CountVector> gts) {
  if (preds.empty()) fail_validation("metrics need at least one sample");
  if (preds.size() != gts.size()) fail_validation("prediction and ground-truth lists differ in length");
}

double total_of(const CountVector& v) {
  double t = 0.0;
  for (double x : v) t += x;
  const double r = std::round(t);
  return std::abs(t - r) <= 1e-6 ? r : t;
}

struct Aggregate {
  double mae = 0, rmse = 0;
};

Aggregate aggregate(std::span<const CountSample> samples, std::span<const std::size_t> members) {
  std::vector<double> abs_err, rms_err;
  abs_err.reserve(members.size());
  rms_err.reserve(members.size());
  for (std::size_t i : members) {
    abs_err.push_back(sample_macro_abs_error(samples[i].pred, samples[i].gt));
    rms_err.push_back(sample_macro_rms_error(samples[i].pred, samples[i].gt));
  }
  const double n = static_cast<double>(members.size());
  return {pairwise_sum(abs_err) / n, pairwise_sum(rms_err) / n};
}

bool opt_eq(const std::optional<double>& a, const std::optional<double>& b) { return a == b; }

}  // namespace

bool RangeReport::operator==(const RangeReport& o) const {
  auto row_eq = [](const RangeRow& a, const RangeRow& b) {
    return a.lo == b.lo && a.hi == b.hi && a.sample_count == b.sample_count && opt_eq(a.mae, b.mae) &&
           opt_eq(a.rmse, b.rmse);
  };
  if (!row_eq(overall, o.overall) || ranges.size() != o.ranges.size() || per_class.size() != o.per_class.size())
    return false;
  for (std::size_t i = 0; i < ranges.size(); ++i)
    if (!row_eq(ranges[i], o.ranges[i])) return false;
  for (std::size_t i = 0; i < per_class.size(); ++i)
    if (per_class[i].class_name != o.per_class[i].class_name || per_class[i].mae != o.per_class[i].mae ||
        per_class[i].rmse != o.per_class[i].rmse)
      return false;
  return true;
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 32) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

CountVector class_counts(const DensityMap& map) {
  CountVector out(map.classes());
  for (int c = 0; c < map.classes(); ++c) out[c] = map.channel_sum(c);
  return out;
}

double sample_macro_abs_error(const CountVector& pred, const CountVector& gt) {
  check_pair(pred, gt);
  double s = 0.0;
  for (std::size_t c = 0; c < pred.size(); ++c) s += std::abs(pred[c] - gt[c]);
  return s / static_cast<double>(pred.size());
}

double sample_macro_rms_error(const CountVector& pred, const CountVector& gt) {
  check_pair(pred, gt);
  double s = 0.0;
  for (std::size_t c = 0; c < pred.size(); ++c) s += (pred[c] - gt[c]) * (pred[c] - gt[c]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double macro_mae(std::span<const CountVector> preds, std::span<const CountVector> gts) {
  check_lists(preds, gts);
  std::vector<double> e(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) e[i] = sample_macro_abs_error(preds[i], gts[i]);
  return pairwise_sum(e) / static_cast<double>(e.size());
}

double macro_rmse(std::span<const CountVector> preds, std::span<const CountVector> gts) {
  check_lists(preds, gts);
  std::vector<double> e(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) e[i] = sample_macro_rms_error(preds[i], gts[i]);
  return pairwise_sum(e) / static_cast<double>(e.size());
}

RangeReport bucketed_report(std::span<const CountSample> samples, std::span<const CountRange> ranges) {
  if (samples.empty()) fail_validation("bucketed_report needs at least one sample");
  for (std::size_t a = 0; a < ranges.size(); ++a) {
    if (ranges[a].lo > ranges[a].hi) fail_validation("range with lo > hi");
    for (std::size_t b = a + 1; b < ranges.size(); ++b)
      if (ranges[a].lo <= ranges[b].hi && ranges[b].lo <= ranges[a].hi) fail_validation("count ranges overlap");
  }
  RangeReport report;
  std::vector<std::vector<std::size_t>> members(ranges.size());
  std::vector<std::size_t> all(samples.size());
  std::string unassigned;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    all[i] = i;
    const double t = total_of(samples[i].gt);
    bool placed = false;
    for (std::size_t r = 0; r < ranges.size() && !placed; ++r)
      if (t >= ranges[r].lo && t <= ranges[r].hi) {
        members[r].push_back(i);
        placed = true;
      }
    if (!placed && !ranges.empty()) {
      std::ostringstream os;
      os << (unassigned.empty() ? "" : ", ") << "#" << i << " (total " << t << ")";
      unassigned += os.str();
    }
  }
  if (!unassigned.empty()) fail_validation("samples outside every count range: " + unassigned);

  const Aggregate whole = aggregate(samples, all);
  double lo = total_of(samples[0].gt), hi = lo;
  if (ranges.empty()) {
    for (const auto& s : samples) {
      lo = std::min(lo, total_of(s.gt));
      hi = std::max(hi, total_of(s.gt));
    }
  } else {
    lo = ranges.front().lo;
    hi = ranges.front().hi;
    for (const auto& r : ranges) {
      lo = std::min(lo, r.lo);
      hi = std::max(hi, r.hi);
    }
  }
  report.overall = {lo, hi, samples.size(), whole.mae, whole.rmse};
  for (std::size_t r = 0; r < ranges.size(); ++r) {
    RangeRow row{ranges[r].lo, ranges[r].hi, members[r].size(), std::nullopt, std::nullopt};
    if (!members[r].empty()) {
      const Aggregate a = aggregate(samples, members[r]);
      row.mae = a.mae;
      row.rmse = a.rmse;
    }
    report.ranges.push_back(row);
  }
  return report;
}

std::vector<ClassRow> per_class_report(std::span<const CountSample> samples, std::span<const std::string> class_names) {
  if (samples.empty()) fail_validation("per_class_report needs at least one sample");
  std::vector<ClassRow> rows;
  const double n = static_cast<double>(samples.size());
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<double> abs_err, sq_err;
    for (const auto& s : samples) {
      check_pair(s.pred, s.gt);
      if (s.pred.size() != class_names.size()) fail_validation("class name count does not match count vectors");
      const double e = std::abs(s.pred[c] - s.gt[c]);
      abs_err.push_back(e);
      sq_err.push_back(e * e);
    }
    rows.push_back({class_names[c], pairwise_sum(abs_err) / n, std::sqrt(pairwise_sum(sq_err) / n)});
  }
  return rows;
}

std::vector<CountRange> parse_ranges(const std::string& text) {
  std::vector<CountRange> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) fail_validation("range '" + item + "' must be written lo:hi");
    try {
      std::size_t p1 = 0, p2 = 0;
      const std::string a = item.substr(0, colon), b = item.substr(colon + 1);
      CountRange r{std::stod(a, &p1), std::stod(b, &p2)};
      if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument(item);
      if (r.lo > r.hi) fail_validation("range '" + item + "' has lo > hi");
      out.push_back(r);
    } catch (const std::logic_error&) {
      fail_validation("range '" + item + "' is not numeric");
    }
  }
  if (out.empty()) fail_validation("no count ranges given");
  for (std::size_t a = 0; a < out.size(); ++a)
    for (std::size_t b = a + 1; b < out.size(); ++b)
      if (out[a].lo <= out[b].hi && out[b].lo <= out[a].hi) fail_validation("count ranges overlap");
  return out;
}

namespace {

nlohmann::json row_json(const RangeRow& r) {
  nlohmann::json j = {{"lo", r.lo}, {"hi", r.hi}, {"sample_count", r.sample_count}};
  j["mae"] = r.mae ? nlohmann::json(*r.mae) : nlohmann::json(nullptr);
  j["rmse"] = r.rmse ? nlohmann::json(*r.rmse) : nlohmann::json(nullptr);
  return j;
}

RangeRow row_from_json(const nlohmann::json& j) {
  RangeRow r;
  r.lo = j.at("lo").get<double>();
  r.hi = j.at("hi").get<double>();
  r.sample_count = j.at("sample_count").get<std::size_t>();
  if (!j.at("mae").is_null()) r.mae = j.at("mae").get<double>();
  if (!j.at("rmse").is_null()) r.rmse = j.at("rmse").get<double>();
  return r;
}

}  // namespace

nlohmann::json to_json(const RangeReport& report) {
  nlohmann::json j;
  j["overall"] = row_json(report.overall);
  j["ranges"] = nlohmann::json::array();
  for (const auto& r : report.ranges) j["ranges"].push_back(row_json(r));
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : report.per_class) j["per_class"].push_back({{"class_name", c.class_name}, {"mae", c.mae}, {"rmse", c.rmse}});
  return j;
}

RangeReport range_report_from_json(const nlohmann::json& j) {
  RangeReport r;
  try {
    r.overall = row_from_json(j.at("overall"));
    for (const auto& row : j.at("ranges")) r.ranges.push_back(row_from_json(row));
    for (const auto& c : j.at("per_class"))
      r.per_class.push_back({c.at("class_name").get<std::string>(), c.at("mae").get<double>(), c.at("rmse").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("range report: ") + e.what());
  }
  return r;
}

std::string format_report(const RangeReport& report) {
  std::ostringstream os;
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << *v;
    return s.str();
  };
  auto label = [](double lo, double hi) {
    std::ostringstream s;
    s << lo << "-" << hi;
    return s.str();
  };
  os << std::left << std::setw(16) << "Count Range" << std::right << std::setw(10) << "Samples" << std::setw(10)
     << "MAE" << std::setw(10) << "RMSE" << "\n";
  os << std::left << std::setw(16) << label(report.overall.lo, report.overall.hi) + " (all)" << std::right
     << std::setw(10) << report.overall.sample_count << std::setw(10) << num(report.overall.mae) << std::setw(10)
     << num(report.overall.rmse) << "\n";
  for (const auto& r : report.ranges)
    os << std::left << std::setw(16) << label(r.lo, r.hi) << std::right << std::setw(10) << r.sample_count
       << std::setw(10) << num(r.mae) << std::setw(10) << num(r.rmse) << "\n";
  if (!report.per_class.empty()) {
    os << "\n" << std::left << std::setw(26) << "Category" << std::right << std::setw(10) << "MAE" << std::setw(10)
       << "RMSE" << "\n";
    for (const auto& c : report.per_class)
      os << std::left << std::setw(26) << c.class_name << std::right << std::setw(10) << num(c.mae) << std::setw(10)
         << num(c.rmse) << "\n";
  }
  return os.str();
}

}  // namespace mcc
