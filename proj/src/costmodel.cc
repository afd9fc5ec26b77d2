// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/costmodel.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>

#include "json.hpp"

namespace taper {

void LinearLatencyModel::validate() const {
  if (!(a >= 0.0)) throw std::invalid_argument("latency model requires a >= 0");
  if (!(b > 0.0) || !(c > 0.0)) throw std::invalid_argument("latency model requires b > 0 and c > 0");
}

Predictor Predictor::linear(const LinearLatencyModel& model) {
  Predictor p;
  p.kind_ = Kind::kLinear;
  p.model_ = model;
  return p;
}

Predictor Predictor::per_sequence_constant(Millis cost_per_sequence) {
  if (!(cost_per_sequence > 0.0)) throw std::invalid_argument("constant predictor cost must be positive");
  Predictor p;
  p.kind_ = Kind::kPerSequenceConstant;
  p.per_sequence_ = cost_per_sequence;
  return p;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double open_unit(std::uint64_t bits) {
  // (0, 1], never zero so the logarithm below stays finite.
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

}  // namespace

double latency_noise(std::uint64_t seed, std::uint64_t step_index, double sigma) {
  if (sigma <= 0.0) return 0.0;
  std::uint64_t state = seed ^ (step_index * 0xd1b54a32d192ed03ULL);
  splitmix64(state);
  const double u1 = open_unit(splitmix64(state));
  const double u2 = open_unit(splitmix64(state));
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  return sigma * std::clamp(z, -3.0, 3.0);
}

Millis realize_latency(const GroundTruthModel& gt, const StepComposition& s, std::uint64_t step_index) {
  return predict(gt.base, s) * (1.0 + latency_noise(gt.seed, step_index, gt.noise_sigma));
}

SampleWindow::SampleWindow(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("sample window capacity must be positive");
}

void SampleWindow::push(const LatencySample& sample) {
  if (samples_.size() == capacity_) samples_.pop_front();
  samples_.push_back(sample);
}

FitResult fit_ols(std::span<const LatencySample> samples) {
  if (samples.size() < 3) throw FitError("need at least 3 samples to fit (a, b, c)");
  const auto m = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd x(m, 3);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    x(i, 0) = 1.0;
    x(i, 1) = static_cast<double>(s.composition.n_tokens);
    x(i, 2) = static_cast<double>(s.composition.aggregate_context);
    y(i) = s.observed;
  }
  // Column scaling keeps the QR rank test meaningful when context is ~1e6.
  Eigen::Vector3d scale = x.colwise().norm().transpose();
  for (int j = 0; j < 3; ++j) {
    if (scale(j) == 0.0) scale(j) = 1.0;
  }
  const Eigen::MatrixXd xs = x * scale.cwiseInverse().asDiagonal();

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
  qr.setThreshold(1e-9);
  if (qr.rank() < 3) {
    auto column_constant = [&](int j) { return (x.col(j).array() == x(0, j)).all(); };
    if (column_constant(1)) throw FitError("rank-deficient design: n_tokens is constant (collinear with intercept)");
    if (column_constant(2)) {
      throw FitError("rank-deficient design: aggregate_context is constant (collinear with intercept)");
    }
    throw FitError("rank-deficient design: aggregate_context is collinear with n_tokens");
  }
  const Eigen::Vector3d coef = qr.solve(y).cwiseQuotient(scale);

  FitResult result;
  result.model = {coef(0), coef(1), coef(2)};
  if (result.model.a < 0.0) {
    result.warnings.push_back("fitted a < 0 clamped to 0");
    result.model.a = 0.0;
  }
  if (result.model.b < kCoefficientFloor) {
    result.warnings.push_back("fitted b below floor clamped to " + std::to_string(kCoefficientFloor));
    result.model.b = kCoefficientFloor;
  }
  if (result.model.c < kCoefficientFloor) {
    result.warnings.push_back("fitted c below floor clamped to " + std::to_string(kCoefficientFloor));
    result.model.c = kCoefficientFloor;
  }
  return result;
}

RefreshResult refresh_model(const LinearLatencyModel& prior, const SampleWindow& window) {
  RefreshResult result{prior, true, {}};
  if (window.size() < 3) return result;
  const auto samples = window.samples();
  try {
    auto fit = fit_ols(samples);
    result.model = fit.model;
    result.warnings = std::move(fit.warnings);
    result.degenerate = false;
  } catch (const FitError&) {
  }
  return result;
}

double evaluate_mape(const LinearLatencyModel& model, std::span<const LatencySample> samples) {
  if (samples.empty()) throw std::invalid_argument("MAPE of an empty sample set");
  double sum = 0.0;
  for (const auto& s : samples) {
    if (!(s.observed > 0.0)) throw std::invalid_argument("observed latency must be positive");
    sum += std::abs(predict(model, s.composition) - s.observed) / s.observed;
  }
  return sum / static_cast<double>(samples.size());
}

RefreshSchedule::RefreshSchedule(Millis interval) : interval_(interval), next_(interval) {
  if (!(interval > 0.0)) throw std::invalid_argument("refresh interval must be positive");
}

bool RefreshSchedule::due(Millis now) {
  if (now < next_) return false;
  while (next_ <= now) next_ += interval_;
  ++fired_;
  return true;
}

namespace {

std::vector<std::int64_t> log_spaced(std::int64_t lo, std::int64_t hi, int count) {
  std::vector<std::int64_t> out;
  for (int i = 0; i < count; ++i) {
    const double t = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
    const double v = std::exp(std::log(static_cast<double>(lo)) * (1.0 - t) + std::log(static_cast<double>(hi)) * t);
    out.push_back(std::llround(v));
  }
  return out;
}

}  // namespace

ProfilingGrid ProfilingGrid::standard(std::int64_t max_batch, std::int64_t min_context, std::int64_t max_context) {
  return {log_spaced(1, max_batch, 20), log_spaced(min_context, max_context, 25)};
}

std::vector<LatencySample> profile(const GroundTruthModel& gt, const ProfilingGrid& grid, std::uint64_t first_step) {
  std::vector<LatencySample> out;
  std::uint64_t step = first_step;
  for (auto n : grid.batch_sizes) {
    for (auto ctx : grid.context_lengths) {
      const StepComposition s{n, n * ctx};
      out.push_back({s, realize_latency(gt, s, step++)});
    }
  }
  return out;
}

void write_samples_json(std::ostream& out, std::span<const LatencySample> samples) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : samples) {
    arr.push_back({{"n", s.composition.n_tokens}, {"L", s.composition.aggregate_context}, {"ms", s.observed}});
  }
  out << nlohmann::json{{"samples", arr}}.dump(1) << '\n';
}

std::vector<LatencySample> read_samples_json(std::istream& in) {
  const auto doc = nlohmann::json::parse(in);
  std::vector<LatencySample> out;
  for (const auto& s : doc.at("samples")) {
    out.push_back({{s.at("n").get<std::int64_t>(), s.at("L").get<std::int64_t>()}, s.at("ms").get<double>()});
  }
  return out;
}

void write_model_json(std::ostream& out, const LinearLatencyModel& model, double mape) {
  out << nlohmann::json{{"a", model.a}, {"b", model.b}, {"c", model.c}, {"mape", mape}}.dump(1) << '\n';
}

LinearLatencyModel read_model_json(std::istream& in) {
  const auto doc = nlohmann::json::parse(in);
  return {doc.at("a").get<double>(), doc.at("b").get<double>(), doc.at("c").get<double>()};
}

}  // namespace taper
