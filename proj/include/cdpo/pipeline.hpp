#pragma once

// End-to-end desk run: data -> graph -> GNN pretraining -> SFT -> the three
// preference-tuned variants -> benchmark. Also the lambda / K sweeps.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/config.hpp"
#include "cdpo/datagen.hpp"
#include "cdpo/eval.hpp"
#include "cdpo/gnn.hpp"
#include "cdpo/trainer.hpp"

namespace cdpo {

using Progress = std::function<void(const std::string&)>;

struct Prepared {
  Dataset data;
  Vocabulary vocab;
  PreferenceGraph graph;
  GnnModel gnn;
  EdgeMetrics gnn_test;
  PolicyModel sft;
  std::vector<TokenTuple> train_tuples;
};

inline std::vector<TokenTuple> tokenize_split(const Dataset& d, const Vocabulary& v, std::string_view split) {
  std::vector<TokenTuple> out;
  for (const auto& t : d.tuples_of(split)) out.push_back(tokenize(v, t));
  return out;
}

inline Prepared prepare(const RunConfig& cfg, const Progress& progress = {}) {
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  Prepared p;
  p.data = generate_dataset(cfg.data_config());
  p.vocab = p.data.vocabulary();
  p.graph = build_graph(p.data, false, cfg.feature_dim, cfg.user_features);
  say("data: " + std::to_string(p.data.personas.size()) + " users, " + std::to_string(p.data.tuples.size()) + " tuples");

  auto pre = pretrain(p.graph, p.graph.split_edges(cfg.seed), cfg.gnn_config());
  p.gnn = std::move(pre.model);
  p.gnn_test = pre.test;
  say("gnn: test accuracy " + std::to_string(pre.test.accuracy));

  p.train_tuples = tokenize_split(p.data, p.vocab, "train");
  auto sft = run_sft(PolicyModel(cfg.policy_config(p.vocab.size())), sft_records(p.train_tuples), cfg.sft_config());
  p.sft = std::move(sft.policy);
  say("sft: " + std::to_string(sft.steps) + " steps, final loss " + std::to_string(sft.step_loss.back()));
  return p;
}

struct Variant {
  std::string name;
  bool soft_tokens = true;
  double lambda = 0.0;
  std::size_t k = 0;
};

// DPO-Vanilla sees no user; DPO-User conditions on the user only; C-DPO adds
// the neighbour terms.
inline std::vector<Variant> standard_variants(const DpoConfig& dpo) {
  return {{"DPO-Vanilla", false, 0.0, 0}, {"DPO-User", true, 0.0, 0}, {"C-DPO", true, dpo.lambda, dpo.k}};
}

inline CdpoConfig variant_config(const RunConfig& cfg, const Variant& v) {
  auto c = cfg.cdpo_config();
  c.use_soft_tokens = v.soft_tokens;
  c.dpo.lambda = v.lambda;
  c.dpo.k = v.k;
  return c;
}

inline Method train_variant(const Prepared& p, const RunConfig& cfg, const Variant& v, const MetricSink& sink = {}) {
  CdpoTrainer t(variant_config(cfg, v), p.sft, p.gnn, p.graph, p.train_tuples);
  t.run(-1, sink);
  Method m{v.name, t.policy(), std::nullopt};
  if (v.soft_tokens) m.gnn = t.gnn();
  return m;
}

// ---- ablation ----

enum class AblationParam { lambda, k };

inline std::string param_name(AblationParam a) { return a == AblationParam::lambda ? "lambda" : "K"; }

inline AblationParam parse_param(const std::string& s) {
  if (s == "lambda") return AblationParam::lambda;
  if (s == "K" || s == "k") return AblationParam::k;
  throw Error("unknown ablation parameter '" + s + "' (expected lambda or K)");
}

// Variant name for one grid point, e.g. "lambda=0.15" or "K=3".
inline std::string grid_label(AblationParam a, double v) {
  char buf[64];
  if (a == AblationParam::lambda) std::snprintf(buf, sizeof buf, "lambda=%g", v);
  else std::snprintf(buf, sizeof buf, "K=%zu", static_cast<std::size_t>(v));
  return buf;
}

struct AblationReport {
  AblationParam param = AblationParam::lambda;
  std::vector<double> values;
  BenchmarkReport report;  // one method per value, in grid order

  const MethodScore& row(double v, Condition c = Condition::like_dislike) const {
    return report.row(grid_label(param, v), c);
  }

  nlohmann::ordered_json json() const {
    auto j = report.json();
    j["param"] = param_name(param);
    j["values"] = values;
    return j;
  }

  std::string table() const { return "ablation over " + param_name(param) + "\n" + report.table(); }
};

// C-DPO trained once per grid value from the same prepared stages, all
// else fixed by `cfg`.
inline AblationReport ablation_grid(const Prepared& p, const RunConfig& cfg, AblationParam param,
                                    const std::vector<double>& values, const Progress& progress = {}) {
  if (values.empty()) throw Error("ablation_grid: no values");
  AblationReport r;
  r.param = param;
  r.values = values;
  std::vector<Method> methods;
  for (double v : values) {
    Variant var{grid_label(param, v), true, cfg.dpo.lambda, cfg.dpo.k};
    if (param == AblationParam::lambda) {
      if (!(v >= 0.0)) throw Error("ablation_grid: lambda must be >= 0");
      var.lambda = v;
    } else {
      if (v < 0.0 || v != std::floor(v)) throw Error("ablation_grid: K must be a non-negative integer");
      var.k = static_cast<std::size_t>(v);
    }
    methods.push_back(train_variant(p, cfg, var));
    if (progress) progress("trained " + var.name);
  }
  r.report = benchmark(methods, p.data, p.graph, p.vocab, cfg.eval);
  return r;
}

inline AblationReport ablation_grid(const RunConfig& cfg, AblationParam param, const std::vector<double>& values,
                                    const Progress& progress = {}) {
  return ablation_grid(prepare(cfg, progress), cfg, param, values, progress);
}

inline BenchmarkReport run_pipeline(const RunConfig& cfg, const Progress& progress = {}, bool include_sft = true) {
  const auto p = prepare(cfg, progress);
  std::vector<Method> methods;
  if (include_sft) methods.push_back({"SFT", p.sft, std::nullopt});
  for (const auto& v : standard_variants(cfg.dpo)) {
    methods.push_back(train_variant(p, cfg, v));
    if (progress) progress("trained " + v.name);
  }
  return benchmark(methods, p.data, p.graph, p.vocab, cfg.eval);
}

}  // namespace cdpo
