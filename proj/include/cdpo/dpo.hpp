#pragma once

// Preference tuples, the per-sample DPO logistic loss and its collaborative
// extension that averages neighbour-conditioned losses on the same tuple.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdpo/diffcore.hpp"
#include "cdpo/error.hpp"
#include "cdpo/policy.hpp"
#include "cdpo/prefgraph.hpp"

namespace cdpo {

struct PreferenceTuple {
  std::string user;
  std::string caption;
  std::string cue;
  std::string chosen;
  std::string rejected;

  friend bool operator==(const PreferenceTuple&, const PreferenceTuple&) = default;
};

struct TokenTuple {
  std::string user;
  std::vector<std::size_t> caption, cue, chosen, rejected;

  std::string describe() const { return "tuple(user=" + user + ")"; }
};

inline TokenTuple tokenize(const Vocabulary& v, const PreferenceTuple& t) {
  if (t.chosen == t.rejected) throw Error("preference tuple for user '" + t.user + "' has chosen == rejected");
  TokenTuple out{t.user, v.encode(t.caption), v.encode(t.cue), v.encode(t.chosen), v.encode(t.rejected)};
  if (out.chosen == out.rejected) throw Error("preference tuple for user '" + t.user + "' has chosen == rejected");
  return out;
}

struct DpoConfig {
  double beta = 0.1;
  double lambda = 0.15;
  std::size_t k = 3;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw Error("dpo: beta must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("dpo: lambda must be >= 0");
  }
};

// -log sigma(beta * (d_theta - d_ref)), in softplus form.
inline double dpo_loss(double delta_theta, double delta_ref, double beta) {
  return diff::kernel::softplus(-beta * (delta_theta - delta_ref));
}

inline diff::Var dpo_loss(const diff::Var& delta_theta, double delta_ref, double beta) {
  using namespace diff;
  Var shifted = add(delta_theta, delta_theta.tape()->constant(Tensor::scalar(-delta_ref)));
  return softplus(scale(shifted, -beta));
}

// individual + lambda * sum(w * L) / sum(w); collaborative part is 0 when the
// weights sum to 0.
inline double cdpo_combine(double individual, const std::vector<std::pair<double, double>>& weighted, double lambda) {
  double ws = 0.0, acc = 0.0;
  for (auto [w, l] : weighted) {
    ws += w;
    acc += w * l;
  }
  return ws > 0.0 ? individual + lambda * acc / ws : individual;
}

// log pi(chosen) - log pi(rejected) on the given tape.
inline diff::Var delta(const PolicyModel::Forward& f, const std::optional<diff::Var>& soft, const TokenTuple& t,
                       const PolicyConfig& cfg) {
  const bool with_soft = soft.has_value();
  auto pos = encode_input(cfg, with_soft, t.caption, t.cue, t.chosen);
  auto neg = encode_input(cfg, with_soft, t.caption, t.cue, t.rejected);
  return diff::sub(f.sequence_logprob(pos, soft), f.sequence_logprob(neg, soft));
}

inline double delta(const PolicyModel& m, const UserVector& user, const TokenTuple& t) {
  diff::Tape tape;
  tape.set_grad_enabled(false);
  auto f = m.forward(tape);
  std::optional<diff::Var> soft;
  if (user) soft = f.soft_tokens(*user);
  return delta(f, soft, t, m.config()).item();
}

// The reference never sees a user. With `slots` it reads the same layout as
// a conditioned policy, the soft-token positions holding zeros.
inline double reference_delta(const PolicyModel& ref, const TokenTuple& t, bool slots = false) {
  if (!slots) return delta(ref, std::nullopt, t);
  diff::Tape tape;
  tape.set_grad_enabled(false);
  auto f = ref.forward(tape);
  const auto zeros = tape.constant(diff::Tensor(ref.config().soft_tokens, ref.config().d_model));
  return delta(f, zeros, t, ref.config()).item();
}

struct CdpoTerms {
  diff::Var loss;
  double individual = 0.0;
  double collaborative = 0.0;  // lambda-scaled
  double weight_sum = 0.0;
  double delta_theta = 0.0;
  double delta_ref = 0.0;
  std::size_t neighbors = 0;
};

// Soft tokens for a user id, or nullopt for unconditioned scoring.
using SoftFn = std::function<std::optional<diff::Var>(const std::string&)>;

inline CdpoTerms cdpo_loss(const PolicyModel::Forward& f, const PolicyConfig& pcfg, const TokenTuple& t,
                           double delta_ref, const std::vector<Neighbor>& neighbors, const SoftFn& soft_for,
                           const DpoConfig& cfg) {
  using namespace diff;
  cfg.validate();
  CdpoTerms out;
  out.delta_ref = delta_ref;
  Var d_u = delta(f, soft_for(t.user), t, pcfg);
  out.delta_theta = d_u.item();
  Var loss = dpo_loss(d_u, delta_ref, cfg.beta);
  out.individual = loss.item();
  if (!std::isfinite(out.individual)) throw NumericError("dpo_loss: non-finite value for " + t.describe());

  std::vector<Var> terms;
  for (const auto& n : neighbors) {
    if (!(n.weight > 0.0)) continue;
    terms.push_back(scale(dpo_loss(delta(f, soft_for(n.id), t, pcfg), delta_ref, cfg.beta), n.weight));
    out.weight_sum += n.weight;
    ++out.neighbors;
  }
  if (out.weight_sum > 0.0) {
    Var acc = terms.size() == 1 ? terms[0] : sum(concat_rows(std::span<const Var>(terms)));
    Var collab = scale(acc, cfg.lambda / out.weight_sum);
    out.collaborative = collab.item();
    if (!std::isfinite(out.collaborative)) throw NumericError("cdpo_loss: non-finite neighbour term for " + t.describe());
    loss = add(loss, collab);
  }
  out.loss = loss;
  return out;
}

inline CdpoTerms cdpo_loss(const PolicyModel::Forward& f, const PolicyConfig& pcfg, const TokenTuple& t,
                           double delta_ref, const PreferenceGraph& graph, const SoftFn& soft_for,
                           const DpoConfig& cfg) {
  const auto neighbors = cfg.k == 0 ? std::vector<Neighbor>{} : graph.k_nearest(t.user, cfg.k);
  return cdpo_loss(f, pcfg, t, delta_ref, neighbors, soft_for, cfg);
}

struct BatchTerms {
  diff::Var loss;
  double individual = 0.0;
  double collaborative = 0.0;
  double weight_sum = 0.0;
  double implicit_accuracy = 0.0;  // fraction with delta_theta > delta_ref
  std::vector<double> per_tuple;
};

// Mean of per-tuple C-DPO losses, reduced in batch order.
inline BatchTerms batch_loss(const PolicyModel::Forward& f, const PolicyConfig& pcfg,
                             const std::vector<const TokenTuple*>& batch, const std::vector<double>& ref_deltas,
                             const PreferenceGraph& graph, const SoftFn& soft_for, const DpoConfig& cfg) {
  using namespace diff;
  if (batch.empty()) throw Error("batch_loss: empty batch");
  if (ref_deltas.size() != batch.size()) throw Error("batch_loss: one reference delta per tuple required");
  BatchTerms out;
  std::vector<Var> losses;
  std::size_t wins = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto terms = cdpo_loss(f, pcfg, *batch[i], ref_deltas[i], graph, soft_for, cfg);
    losses.push_back(terms.loss);
    out.per_tuple.push_back(terms.loss.item());
    out.individual += terms.individual;
    out.collaborative += terms.collaborative;
    out.weight_sum += terms.weight_sum;
    wins += terms.delta_theta > terms.delta_ref;
  }
  const double n = static_cast<double>(batch.size());
  Var total = losses.size() == 1 ? losses[0] : sum(concat_rows(std::span<const Var>(losses)));
  out.loss = scale(total, 1.0 / n);
  out.individual /= n;
  out.collaborative /= n;
  out.weight_sum /= n;
  out.implicit_accuracy = static_cast<double>(wins) / n;
  return out;
}

}  // namespace cdpo
