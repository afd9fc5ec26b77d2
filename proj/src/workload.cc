// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/workload.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace taper {

using nlohmann::json;

std::int64_t ParallelStage::branch_tokens() const {
  return std::accumulate(branch_lengths.begin(), branch_lengths.end(), std::int64_t{0});
}

std::int64_t stage_tokens(const Stage& stage) {
  return std::visit(
      [](const auto& s) -> std::int64_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(s)>, SerialStage>) {
          return s.token_count;
        } else {
          return s.total_tokens();
        }
      },
      stage);
}

bool RequestScript::decomposable() const {
  return std::any_of(stages.begin(), stages.end(),
                     [](const Stage& s) { return std::holds_alternative<ParallelStage>(s); });
}

std::int64_t RequestScript::output_tokens() const {
  std::int64_t total = 0;
  for (const auto& s : stages) total += stage_tokens(s);
  return total;
}

std::int64_t RequestScript::parallel_branch_tokens() const {
  std::int64_t total = 0;
  for (const auto& s : stages) {
    if (const auto* p = std::get_if<ParallelStage>(&s)) total += p->branch_tokens();
  }
  return total;
}

TraceError::TraceError(int line, const std::string& message)
    : std::runtime_error("trace line " + std::to_string(line) + ": " + message), line_(line) {}

void validate_script(const RequestScript& script) {
  if (script.arrival_time < 0.0) throw std::invalid_argument("negative arrival time");
  if (script.prompt_tokens < 0) throw std::invalid_argument("negative token count");
  if (script.stages.empty()) throw std::invalid_argument("request has no stages");
  for (const auto& stage : script.stages) {
    if (const auto* s = std::get_if<SerialStage>(&stage)) {
      if (s->token_count < 0) throw std::invalid_argument("negative token count");
      if (s->token_count == 0) throw std::invalid_argument("serial stage must have at least one token");
    } else {
      const auto& p = std::get<ParallelStage>(stage);
      if (p.header_tokens < 0 || p.reduce_tokens < 0) throw std::invalid_argument("negative token count");
      for (auto len : p.branch_lengths) {
        if (len < 0) throw std::invalid_argument("negative token count");
        if (len == 0) throw std::invalid_argument("branch length must be at least 1");
      }
      if (p.fanout() < 2) throw std::invalid_argument("fanout < 2");
    }
  }
}

namespace {

std::int64_t require_int(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw std::invalid_argument(std::string("missing key '") + key + "'");
  if (!it->is_number_integer()) throw std::invalid_argument(std::string("key '") + key + "' must be an integer");
  return it->get<std::int64_t>();
}

Stage parse_stage(const json& obj) {
  if (!obj.is_object() || obj.size() != 1) {
    throw std::invalid_argument("stage must be an object with exactly one of 'serial' or 'parallel'");
  }
  if (auto it = obj.find("serial"); it != obj.end()) {
    if (!it->is_number_integer()) throw std::invalid_argument("'serial' must be an integer token count");
    return SerialStage{it->get<std::int64_t>()};
  }
  auto it = obj.find("parallel");
  if (it == obj.end() || !it->is_object()) throw std::invalid_argument("unknown stage kind");
  const json& p = *it;
  ParallelStage stage;
  stage.header_tokens = p.contains("header") ? require_int(p, "header") : 0;
  stage.reduce_tokens = p.contains("reduce") ? require_int(p, "reduce") : 0;
  auto br = p.find("branches");
  if (br == p.end() || !br->is_array()) throw std::invalid_argument("parallel stage needs a 'branches' array");
  for (const auto& b : *br) {
    if (b.is_object() || b.is_array()) throw std::invalid_argument("nested parallel phases are not supported");
    if (!b.is_number_integer()) throw std::invalid_argument("branch lengths must be integers");
    stage.branch_lengths.push_back(b.get<std::int64_t>());
  }
  return stage;
}

json stage_to_json(const Stage& stage) {
  if (const auto* s = std::get_if<SerialStage>(&stage)) return json{{"serial", s->token_count}};
  const auto& p = std::get<ParallelStage>(stage);
  return json{{"parallel", {{"header", p.header_tokens}, {"branches", p.branch_lengths}, {"reduce", p.reduce_tokens}}}};
}

}  // namespace

Trace parse_trace(std::istream& in) {
  Trace trace;
  std::set<RequestId> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw TraceError(line_no, std::string("syntax error: ") + e.what());
    }
    if (!obj.is_object()) throw TraceError(line_no, "record must be a JSON object");
    if (auto meta = obj.find("meta"); meta != obj.end()) {
      if (!meta->is_object()) throw TraceError(line_no, "'meta' must be an object");
      for (const auto& [k, v] : meta->items()) {
        trace.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    try {
      RequestScript script;
      script.request_id = require_int(obj, "id");
      auto arr = obj.find("arrival_ms");
      if (arr == obj.end() || !arr->is_number()) throw std::invalid_argument("missing numeric 'arrival_ms'");
      script.arrival_time = arr->get<double>();
      script.prompt_tokens = require_int(obj, "prompt");
      if (obj.contains("class")) script.request_class = static_cast<int>(require_int(obj, "class"));
      auto stages = obj.find("stages");
      if (stages == obj.end() || !stages->is_array()) throw std::invalid_argument("missing 'stages' array");
      for (const auto& s : *stages) script.stages.push_back(parse_stage(s));
      validate_script(script);
      if (!seen.insert(script.request_id).second) throw std::invalid_argument("duplicate request id");
      if (!trace.scripts.empty() && script.arrival_time < trace.scripts.back().arrival_time) trace.resorted = true;
      trace.scripts.push_back(std::move(script));
    } catch (const std::invalid_argument& e) {
      throw TraceError(line_no, e.what());
    }
  }
  if (trace.resorted) {
    std::stable_sort(trace.scripts.begin(), trace.scripts.end(),
                     [](const auto& a, const auto& b) { return a.arrival_time < b.arrival_time; });
  }
  return trace;
}

Trace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  return parse_trace(in);
}

void write_trace(std::ostream& out, const Trace& trace) {
  if (!trace.metadata.empty()) out << json{{"meta", trace.metadata}}.dump() << '\n';
  for (const auto& s : trace.scripts) {
    json obj{{"id", s.request_id}, {"arrival_ms", s.arrival_time}, {"prompt", s.prompt_tokens}};
    if (s.request_class != 0) obj["class"] = s.request_class;
    json stages = json::array();
    for (const auto& st : s.stages) stages.push_back(stage_to_json(st));
    obj["stages"] = std::move(stages);
    out << obj.dump() << '\n';
  }
}

void save_trace(const std::string& path, const Trace& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace file: " + path);
  write_trace(out, trace);
}

void RegimeSpec::validate() const {
  if (segments.empty()) throw std::invalid_argument("regime has no segments");
  for (const auto& seg : segments) {
    if (!(seg.mean_rate > 0.0)) throw std::invalid_argument("segment rate must be positive");
    if (!(seg.duration_min > 0.0)) throw std::invalid_argument("segment duration must be positive");
  }
  if (pdr_target < 0.0 || pdr_target > 1.0) throw std::invalid_argument("pdr must be in [0, 1]");
  if (pts_target <= 0.0 || pts_target >= 1.0) throw std::invalid_argument("pts must be in (0, 1)");
  if (fanout_percentiles.empty()) throw std::invalid_argument("fanout percentile table is empty");
  int prev = 0;
  for (const auto& [pct, value] : fanout_percentiles) {
    if (pct <= 0.0 || pct >= 100.0) throw std::invalid_argument("fanout percentiles must lie in (0, 100)");
    if (value < 2) throw std::invalid_argument("fanout values must be at least 2");
    if (value < prev) throw std::invalid_argument("fanout percentiles must be non-decreasing");
    prev = value;
  }
  if (!(prompt_length.mean > 0.0) || prompt_length.stddev < 0.0) {
    throw std::invalid_argument("degenerate prompt length distribution");
  }
  if (!(output_length.mean > 0.0) || output_length.stddev < 0.0) {
    throw std::invalid_argument("degenerate output length distribution");
  }
  if (max_parallel_stages < 1) throw std::invalid_argument("max_parallel_stages must be >= 1");
  if (!(slo_tpot > 0.0)) throw std::invalid_argument("slo_tpot must be positive");
}

RegimeSpec RegimeSpec::from_config(const KeyValueConfig& cfg) {
  RegimeSpec spec;
  for (const auto& item : cfg.get_list("segments")) {
    auto parts = split(item, ':');
    if (parts.size() != 2) throw ConfigError("segment must be 'minutes:rate', got '" + item + "'");
    spec.segments.push_back({parse_double(parts[0], "segment duration"), parse_double(parts[1], "segment rate")});
  }
  if (cfg.has("fanout_percentiles")) {
    spec.fanout_percentiles.clear();
    for (const auto& item : cfg.get_list("fanout_percentiles")) {
      auto parts = split(item, ':');
      if (parts.size() != 2) throw ConfigError("fanout entry must be 'percentile:value', got '" + item + "'");
      spec.fanout_percentiles[parse_double(parts[0], "percentile")] =
          static_cast<int>(parse_int(parts[1], "fanout"));
    }
  }
  spec.pdr_target = cfg.get_double("pdr", spec.pdr_target);
  spec.pts_target = cfg.get_double("pts", spec.pts_target);
  spec.prompt_length.mean = cfg.get_double("prompt_mean", spec.prompt_length.mean);
  spec.prompt_length.stddev = cfg.get_double("prompt_std", spec.prompt_length.stddev);
  spec.output_length.mean = cfg.get_double("output_mean", spec.output_length.mean);
  spec.output_length.stddev = cfg.get_double("output_std", spec.output_length.stddev);
  spec.max_parallel_stages = static_cast<int>(cfg.get_int("max_parallel_stages", spec.max_parallel_stages));
  spec.slo_tpot = cfg.get_double("slo_tpot", spec.slo_tpot);
  spec.validate();
  return spec;
}

FanoutSampler::FanoutSampler(const std::map<double, int>& percentiles) {
  if (percentiles.empty()) throw std::invalid_argument("fanout percentile table is empty");
  knots_.emplace_back(0.0, percentiles.begin()->second);
  for (const auto& [pct, value] : percentiles) knots_.emplace_back(pct / 100.0, value);
  knots_.emplace_back(1.0, percentiles.rbegin()->second);
}

int FanoutSampler::quantile(double u) const {
  u = std::clamp(u, 0.0, 1.0);
  auto hi = std::lower_bound(knots_.begin(), knots_.end(), u,
                             [](const auto& knot, double x) { return knot.first < x; });
  if (hi == knots_.begin()) return std::max(2, static_cast<int>(std::lround(hi->second)));
  auto lo = std::prev(hi);
  const double span = hi->first - lo->first;
  const double t = span > 0.0 ? (u - lo->first) / span : 1.0;
  const double value = lo->second + t * (hi->second - lo->second);
  return std::max(2, static_cast<int>(std::lround(value)));
}

namespace {

std::lognormal_distribution<double> fitted_lognormal(const LengthDistribution& d) {
  const double ratio = d.stddev / d.mean;
  const double sigma2 = std::log1p(ratio * ratio);
  return std::lognormal_distribution<double>(std::log(d.mean) - 0.5 * sigma2, std::sqrt(sigma2));
}

// Splits `total` into weights.size() parts, each at least `min_each`,
// proportional to `weights` for the remainder (largest-remainder rounding).
std::vector<std::int64_t> split_integer(std::int64_t total, const std::vector<double>& weights,
                                        std::int64_t min_each) {
  const auto n = static_cast<std::int64_t>(weights.size());
  std::vector<std::int64_t> parts(weights.size(), min_each);
  std::int64_t rest = total - n * min_each;
  if (rest <= 0) return parts;
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(rest) * weights[i] / wsum;
    const auto whole = static_cast<std::int64_t>(std::floor(exact));
    parts[i] += whole;
    assigned += whole;
    remainders.emplace_back(exact - static_cast<double>(whole), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::int64_t k = 0; k < rest - assigned; ++k) parts[remainders[static_cast<std::size_t>(k)].second] += 1;
  return parts;
}

}  // namespace

Trace generate_trace(const RegimeSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(0.5, 1.5);
  auto prompt_dist = fitted_lognormal(spec.prompt_length);
  auto output_dist = fitted_lognormal(spec.output_length);
  std::uniform_int_distribution<int> phase_count(1, spec.max_parallel_stages);
  const FanoutSampler fanout(spec.fanout_percentiles);

  Trace trace;
  std::string segments_meta;
  Millis segment_start = 0.0;
  RequestId next_id = 0;
  for (const auto& seg : spec.segments) {
    const Millis segment_end = segment_start + seg.duration_min * kMsPerMinute;
    std::exponential_distribution<double> gap(seg.mean_rate / 1000.0);
    Millis t = segment_start;
    while (true) {
      t += gap(rng);
      if (t >= segment_end) break;
      RequestScript script;
      script.request_id = next_id++;
      script.arrival_time = std::round(t * 1000.0) / 1000.0;
      script.prompt_tokens = std::max<std::int64_t>(1, std::llround(prompt_dist(rng)));
      auto output = std::max<std::int64_t>(1, std::llround(output_dist(rng)));
      const bool decomposable = unit(rng) < spec.pdr_target;
      if (!decomposable) {
        script.stages.push_back(SerialStage{output});
      } else {
        const int phases = phase_count(rng);
        std::vector<int> fanouts(static_cast<std::size_t>(phases));
        for (auto& f : fanouts) f = fanout.quantile(unit(rng));
        const std::int64_t min_parallel = std::accumulate(fanouts.begin(), fanouts.end(), std::int64_t{0});
        std::int64_t parallel = std::llround(static_cast<double>(output) * spec.pts_target);
        parallel = std::max(parallel, min_parallel);
        output = std::max(output, parallel + 1);
        const std::int64_t serial = output - parallel;

        // Serial tokens: a lead stage, then (header, reduce, trailing serial) per phase.
        std::vector<double> serial_weights(static_cast<std::size_t>(3 * phases + 1));
        for (auto& w : serial_weights) w = jitter(rng);
        auto serial_parts = split_integer(serial, serial_weights, 0);
        std::vector<double> phase_weights(static_cast<std::size_t>(phases));
        for (auto& w : phase_weights) w = jitter(rng);
        std::vector<std::int64_t> phase_tokens(static_cast<std::size_t>(phases));
        {
          // Each phase first receives one token per branch, the remainder by weight.
          auto extra = split_integer(parallel - min_parallel, phase_weights, 0);
          for (int j = 0; j < phases; ++j) phase_tokens[j] = fanouts[j] + extra[j];
        }
        if (serial_parts[0] > 0) script.stages.push_back(SerialStage{serial_parts[0]});
        for (int j = 0; j < phases; ++j) {
          ParallelStage stage;
          stage.header_tokens = serial_parts[1 + 3 * j];
          stage.reduce_tokens = serial_parts[2 + 3 * j];
          std::vector<double> branch_weights(static_cast<std::size_t>(fanouts[j]));
          for (auto& w : branch_weights) w = jitter(rng);
          stage.branch_lengths = split_integer(phase_tokens[j], branch_weights, 1);
          script.stages.push_back(std::move(stage));
          if (serial_parts[3 + 3 * j] > 0) script.stages.push_back(SerialStage{serial_parts[3 + 3 * j]});
        }
      }
      trace.scripts.push_back(std::move(script));
    }
    if (!segments_meta.empty()) segments_meta += ",";
    std::ostringstream seg_text;
    seg_text << seg.duration_min << ":" << seg.mean_rate;
    segments_meta += seg_text.str();
    segment_start = segment_end;
  }
  trace.metadata["generator_seed"] = std::to_string(seed);
  trace.metadata["segments"] = segments_meta;
  std::ostringstream slo;
  slo << spec.slo_tpot;
  trace.metadata["slo_tpot"] = slo.str();
  return trace;
}

WorkloadStats characterize(const Trace& trace) {
  if (trace.scripts.empty()) throw std::invalid_argument("cannot characterize an empty trace");
  WorkloadStats stats;
  stats.requests = static_cast<std::int64_t>(trace.scripts.size());
  std::int64_t decomposable = 0;
  double pts_sum = 0.0;
  std::int64_t fanout_sum = 0;
  for (const auto& s : trace.scripts) {
    if (!s.decomposable()) continue;
    ++decomposable;
    pts_sum += static_cast<double>(s.parallel_branch_tokens()) / static_cast<double>(s.output_tokens());
    for (const auto& st : s.stages) {
      if (const auto* p = std::get_if<ParallelStage>(&st)) {
        ++stats.parallel_stages;
        fanout_sum += p->fanout();
      }
    }
  }
  stats.pdr = static_cast<double>(decomposable) / static_cast<double>(stats.requests);
  stats.pts = decomposable > 0 ? pts_sum / static_cast<double>(decomposable) : 0.0;
  stats.abf = stats.parallel_stages > 0
                  ? static_cast<double>(fanout_sum) / static_cast<double>(stats.parallel_stages)
                  : 0.0;
  return stats;
}

}  // namespace taper
