#pragma once

// Two training stages: supervised fine-tuning of the unconditioned policy on
// chosen instructions, then preference fine-tuning of a user-conditioned copy
// with the GNN encoder and soft-prompt projector trained at a lower rate.
// The DPO baselines are the same trainer with soft tokens or neighbours off.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/checkpoint.hpp"
#include "cdpo/dpo.hpp"
#include "cdpo/gnn.hpp"
#include "cdpo/optim.hpp"
#include "cdpo/policy.hpp"
#include "cdpo/prefgraph.hpp"
#include "cdpo/rng.hpp"

namespace cdpo {

using MetricSink = std::function<void(const nlohmann::ordered_json&)>;

// ---- model <-> checkpoint ----

inline Checkpoint policy_checkpoint(const PolicyModel& m) {
  PolicyModel copy = m;
  Checkpoint c;
  c.put_parameters(copy.parameters());
  c.config = {{"kind", "policy"}, {"policy", nlohmann::ordered_json(m.config())}};
  return c;
}

inline PolicyModel load_policy(const Checkpoint& c) {
  if (c.config.value("kind", "") != "policy" && !c.config.contains("policy")) {
    throw FormatError("checkpoint does not contain a policy");
  }
  PolicyModel m(c.config.at("policy").get<PolicyConfig>());
  c.load_parameters(m.parameters());
  return m;
}

inline Checkpoint gnn_checkpoint(const GnnModel& m) {
  GnnModel copy = m;
  Checkpoint c;
  c.put_parameters(copy.parameters());
  c.config = {{"kind", "gnn"},
              {"gnn", nlohmann::ordered_json(m.config())},
              {"learned_users", m.learned_user_order()},
              {"has_decoder", m.has_decoder()}};
  return c;
}

inline GnnModel load_gnn(const Checkpoint& c) {
  if (!c.config.contains("gnn")) throw FormatError("checkpoint does not contain a GNN");
  GnnModel m(c.config.at("gnn").get<GnnConfig>(), c.config.at("learned_users").get<std::vector<std::string>>());
  if (!c.config.value("has_decoder", true)) m.drop_decoder();
  c.load_parameters(m.parameters());
  return m;
}

// ---- SFT ----

struct SftConfig {
  int epochs = 1;
  std::size_t batch_size = 16;
  double lr = 2e-6;
  bool cosine = true;
  double clip = 1.0;
  // Also fit each record behind all-zero soft-token slots, so the policy
  // behaves the same with and without an (initially near-zero) user prefix.
  bool soft_slots = true;
  std::uint64_t seed = 0;
};

template <class Json>
void to_json(Json& j, const SftConfig& c) {
  j = Json{{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},          {"cosine", c.cosine},
           {"clip", c.clip},     {"soft_slots", c.soft_slots}, {"seed", c.seed}};
}

struct SftRecord {
  std::vector<std::size_t> caption, cue, target;
};

inline std::vector<SftRecord> sft_records(const std::vector<TokenTuple>& tuples) {
  std::vector<SftRecord> out;
  for (const auto& t : tuples) out.push_back({t.caption, t.cue, t.chosen});
  return out;
}

// Mean per-sequence negative log-likelihood of the targets.
inline double sft_nll(const PolicyModel& m, const std::vector<SftRecord>& records) {
  if (records.empty()) throw Error("sft_nll: no records");
  double total = 0.0;
  for (const auto& r : records) {
    total -= sequence_logprob(m, std::nullopt, encode_input(m.config(), false, r.caption, r.cue, r.target));
  }
  return total / static_cast<double>(records.size());
}

struct SftResult {
  PolicyModel policy;
  std::vector<double> step_loss;
  int steps = 0;
};

inline SftResult run_sft(const PolicyModel& init, const std::vector<SftRecord>& records, const SftConfig& cfg,
                         const MetricSink& sink = {}) {
  if (records.empty()) throw Error("run_sft: empty dataset");
  if (cfg.epochs <= 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0)) throw Error("run_sft: invalid schedule");
  SftResult res{init, {}, 0};
  PolicyModel& m = res.policy;
  auto params = m.policy_parameters();
  AdamW opt;
  Rng rng(cfg.seed);
  const std::size_t per_epoch = (records.size() + cfg.batch_size - 1) / cfg.batch_size;
  const auto total = static_cast<std::int64_t>(per_epoch) * cfg.epochs;
  std::int64_t step = 0;
  std::vector<std::size_t> order(records.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      for (auto* p : params) p->zero_grad();
      double loss_value = 0.0;
      {
        diff::Tape tape;
        auto f = m.forward(tape);
        std::vector<diff::Var> lps;
        const auto zeros = tape.constant(diff::Tensor(m.config().soft_tokens, m.config().d_model));
        for (std::size_t i = b; i < e; ++i) {
          const auto& r = records[order[i]];
          lps.push_back(f.sequence_logprob(encode_input(m.config(), false, r.caption, r.cue, r.target), std::nullopt));
          if (cfg.soft_slots) {
            lps.push_back(f.sequence_logprob(encode_input(m.config(), true, r.caption, r.cue, r.target), zeros));
          }
        }
        auto loss = diff::scale(diff::sum(diff::concat_rows(std::span<const diff::Var>(lps))),
                                -1.0 / static_cast<double>(lps.size()));
        loss_value = loss.item();
        tape.backward(loss);
      }
      const double gn = clip_grad_norm(params, cfg.clip);
      const double lr = cfg.cosine ? cosine_lr(cfg.lr, step, total) : cfg.lr;
      opt.step(params, lr);
      res.step_loss.push_back(loss_value);
      if (sink) {
        sink({{"stage", "sft"}, {"step", step}, {"epoch", epoch}, {"loss", loss_value}, {"lr", lr}, {"grad_norm", gn}});
      }
      ++step;
    }
  }
  res.steps = static_cast<int>(step);
  return res;
}

// ---- C-DPO ----

struct CdpoConfig {
  int steps = 300;
  std::size_t batch_size = 12;
  double lr_policy = 2e-7;
  double lr_gnn = 2e-8;
  bool cosine = true;
  double clip = 1.0;
  bool use_soft_tokens = true;
  bool train_gnn = true;
  DpoConfig dpo;
  std::uint64_t seed = 0;

  void validate() const {
    dpo.validate();
    if (steps <= 0 || batch_size == 0) throw Error("cdpo: steps and batch_size must be positive");
    if (!(lr_policy > 0.0) || !(lr_gnn > 0.0)) throw Error("cdpo: learning rates must be positive");
    if (lr_gnn > lr_policy) throw Error("cdpo: lr_gnn must not exceed lr_policy");
  }
};

template <class Json>
void to_json(Json& j, const CdpoConfig& c) {
  j = Json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"lr_policy", c.lr_policy},
           {"lr_gnn", c.lr_gnn},
           {"cosine", c.cosine},
           {"clip", c.clip},
           {"use_soft_tokens", c.use_soft_tokens},
           {"train_gnn", c.train_gnn},
           {"beta", c.dpo.beta},
           {"lambda", c.dpo.lambda},
           {"k", c.dpo.k},
           {"seed", c.seed}};
}

template <class Json>
void from_json(const Json& j, CdpoConfig& c) {
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_policy").get_to(c.lr_policy);
  j.at("lr_gnn").get_to(c.lr_gnn);
  j.at("cosine").get_to(c.cosine);
  j.at("clip").get_to(c.clip);
  j.at("use_soft_tokens").get_to(c.use_soft_tokens);
  j.at("train_gnn").get_to(c.train_gnn);
  j.at("beta").get_to(c.dpo.beta);
  j.at("lambda").get_to(c.dpo.lambda);
  j.at("k").get_to(c.dpo.k);
  j.at("seed").get_to(c.seed);
}

struct StepMetrics {
  int step = 0;
  double loss = 0.0, individual = 0.0, collab = 0.0, lr = 0.0, lr_gnn = 0.0, acc_implicit = 0.0, grad_norm = 0.0;

  nlohmann::ordered_json json() const {
    return {{"step", step},           {"loss", loss},     {"individual", individual},
            {"collab", collab},       {"lr", lr},         {"lr_gnn", lr_gnn},
            {"acc_implicit", acc_implicit}, {"grad_norm", grad_norm}};
  }
};

class CdpoTrainer {
 public:
  CdpoTrainer(const CdpoConfig& cfg, const PolicyModel& sft, const GnnModel& gnn, const PreferenceGraph& graph,
              std::vector<TokenTuple> tuples)
      : cfg_(cfg), ref_(sft), policy_(sft), gnn_(gnn), graph_(graph), tuples_(std::move(tuples)), rng_(cfg.seed) {
    cfg_.validate();
    if (tuples_.empty()) throw Error("cdpo: no training tuples");
    if (cfg_.batch_size > tuples_.size()) throw Error("cdpo: batch_size exceeds the number of tuples");
    for (const auto& t : tuples_) {
      if (!graph_.has_user(t.user)) {
        throw LookupError("cdpo: user '" + t.user + "' from the dataset is missing from the graph (rebuild it with build-graph)");
      }
    }
    if (cfg_.use_soft_tokens && gnn_.out_dim() != policy_.config().user_dim) {
      throw ShapeError("cdpo: GNN output width " + std::to_string(gnn_.out_dim()) + " != policy user_dim " +
                       std::to_string(policy_.config().user_dim));
    }
    ref_deltas_.reserve(tuples_.size());
    for (const auto& t : tuples_) ref_deltas_.push_back(reference_delta(ref_, t, cfg_.use_soft_tokens));
  }

  const CdpoConfig& config() const { return cfg_; }
  const PolicyModel& policy() const { return policy_; }
  const PolicyModel& reference() const { return ref_; }
  const GnnModel& gnn() const { return gnn_; }
  int current_step() const { return step_; }
  bool done() const { return step_ >= cfg_.steps; }
  const std::vector<double>& reference_deltas() const { return ref_deltas_; }

  StepMetrics step() {
    if (done()) throw Error("cdpo: training already finished");
    // Distinct tuples via a partial Fisher-Yates draw.
    std::vector<std::size_t> pool(tuples_.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    std::vector<const TokenTuple*> batch;
    std::vector<double> refs;
    for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
      const std::size_t j = i + rng_.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      batch.push_back(&tuples_[pool[i]]);
      refs.push_back(ref_deltas_[pool[i]]);
    }

    auto policy_params = policy_.policy_parameters();
    auto side_params = side_parameters();
    std::vector<diff::Parameter*> all = policy_params;
    all.insert(all.end(), side_params.begin(), side_params.end());
    for (auto* p : all) p->zero_grad();

    StepMetrics m;
    m.step = step_;
    {
      diff::Tape tape;
      auto f = policy_.forward(tape);
      std::optional<GraphEncoding> enc;
      if (cfg_.use_soft_tokens) {
        enc = cfg_.train_gnn ? gnn_.encode_all(tape, graph_) : std::as_const(gnn_).encode_all(tape, graph_);
      }
      std::map<std::string, diff::Var> cache;
      SoftFn soft_for = [&](const std::string& id) -> std::optional<diff::Var> {
        if (!enc) return std::nullopt;
        if (auto it = cache.find(id); it != cache.end()) return it->second;
        auto h = diff::gather_rows(enc->nodes, {enc->user_row(graph_.user_index(id))});
        return cache.emplace(id, f.soft_tokens(h)).first->second;
      };
      auto terms = batch_loss(f, policy_.config(), batch, refs, graph_, soft_for, cfg_.dpo);
      m.loss = terms.loss.item();
      m.individual = terms.individual;
      m.collab = terms.collaborative;
      m.acc_implicit = terms.implicit_accuracy;
      tape.backward(terms.loss);
    }
    m.grad_norm = clip_grad_norm(all, cfg_.clip);
    m.lr = cfg_.cosine ? cosine_lr(cfg_.lr_policy, step_, cfg_.steps) : cfg_.lr_policy;
    m.lr_gnn = cfg_.cosine ? cosine_lr(cfg_.lr_gnn, step_, cfg_.steps) : cfg_.lr_gnn;
    opt_policy_.step(policy_params, m.lr);
    if (!side_params.empty()) opt_side_.step(side_params, m.lr_gnn);
    ++step_;
    return m;
  }

  std::vector<StepMetrics> run(int max_steps = -1, const MetricSink& sink = {}) {
    std::vector<StepMetrics> out;
    for (int i = 0; !done() && (max_steps < 0 || i < max_steps); ++i) {
      out.push_back(step());
      if (sink) sink(out.back().json());
    }
    return out;
  }

  // Embedding of a training user under the current encoder.
  std::vector<double> user_embedding(const std::string& id) const { return gnn_.encode(graph_, id); }

  // Everything needed to continue bit-for-bit.
  Checkpoint checkpoint() const {
    Checkpoint c = policy_checkpoint(policy_);
    for (const auto& [k, v] : gnn_checkpoint(gnn_).tensors) c.put(k, v);
    for (const auto& [k, v] : opt_policy_.export_state("adam.policy/")) c.put(k, v);
    for (const auto& [k, v] : opt_side_.export_state("adam.side/")) c.put(k, v);
    c.put("trainer.step", diff::Tensor::scalar(step_));
    const auto g = gnn_checkpoint(gnn_).config;
    c.config = {{"kind", "cdpo"},
                {"policy", nlohmann::ordered_json(policy_.config())},
                {"gnn", g.at("gnn")},
                {"learned_users", g.at("learned_users")},
                {"has_decoder", g.at("has_decoder")},
                {"cdpo", nlohmann::ordered_json(cfg_)}};
    c.rng_state = rng_.state();
    return c;
  }

  void restore(const Checkpoint& c) {
    if (c.config.value("kind", "") != "cdpo") throw FormatError("checkpoint is not a cdpo training state");
    if (nlohmann::ordered_json(cfg_) != c.config.at("cdpo")) {
      throw Error("cdpo: checkpoint was written with a different training config");
    }
    c.load_parameters(policy_.parameters());
    c.load_parameters(gnn_.encoder_parameters());
    opt_policy_.import_state(c.tensors, "adam.policy/");
    opt_side_.import_state(c.tensors, "adam.side/");
    step_ = static_cast<int>(c.get("trainer.step").item());
    rng_.restore(c.rng_state);
  }

 private:
  std::vector<diff::Parameter*> side_parameters() {
    std::vector<diff::Parameter*> ps;
    if (!cfg_.use_soft_tokens) return ps;
    ps = policy_.projector_parameters();
    if (cfg_.train_gnn)
      for (auto* p : gnn_.encoder_parameters()) ps.push_back(p);
    return ps;
  }

  CdpoConfig cfg_;
  PolicyModel ref_;
  PolicyModel policy_;
  GnnModel gnn_;
  PreferenceGraph graph_;
  std::vector<TokenTuple> tuples_;
  std::vector<double> ref_deltas_;
  AdamW opt_policy_, opt_side_;
  Rng rng_;
  int step_ = 0;
};

}  // namespace cdpo
