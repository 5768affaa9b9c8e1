#pragma once

// Two-layer mean-aggregation GraphSAGE encoder over the preference graph,
// a two-linear-layer edge decoder, supervised polarity pretraining and
// inductive embedding of unseen users.

#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cdpo/diffcore.hpp"
#include "cdpo/optim.hpp"
#include "cdpo/prefgraph.hpp"

namespace cdpo {

struct GnnConfig {
  std::size_t in_dim = kAttributeDim;
  std::size_t hidden_dim = 64;
  std::size_t out_dim = 32;
  std::size_t decoder_hidden = 32;
  int epochs = 150;
  double lr = 3e-5;
  std::uint64_t seed = 0;
};

template <class Json>
void to_json(Json& j, const GnnConfig& c) {
  j = Json{{"in_dim", c.in_dim},
           {"hidden_dim", c.hidden_dim},
           {"out_dim", c.out_dim},
           {"decoder_hidden", c.decoder_hidden},
           {"epochs", c.epochs},
           {"lr", c.lr},
           {"seed", c.seed}};
}

template <class Json>
void from_json(const Json& j, GnnConfig& c) {
  j.at("in_dim").get_to(c.in_dim);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("out_dim").get_to(c.out_dim);
  j.at("decoder_hidden").get_to(c.decoder_hidden);
  j.at("epochs").get_to(c.epochs);
  j.at("lr").get_to(c.lr);
  j.at("seed").get_to(c.seed);
}

struct UserEmbedding {
  std::string user_id;
  std::vector<double> h;
};

// Encoder output for every node: rows 0..users-1 are users, the rest are
// attributes, in graph order.
struct GraphEncoding {
  diff::Var nodes;
  std::size_t num_users = 0;

  std::size_t user_row(std::size_t user_index) const { return user_index; }
  std::size_t attribute_row(std::size_t attribute_index) const { return num_users + attribute_index; }
};

class GnnModel {
 public:
  GnnModel() = default;

  // `learned_users` get a trainable feature row (initialised to zero, the
  // same vector an unseen user starts from).
  GnnModel(const GnnConfig& config, const std::vector<std::string>& learned_users) : config_(config) {
    if (config.in_dim == 0 || config.hidden_dim == 0 || config.out_dim == 0 || config.decoder_hidden == 0) {
      throw Error("GnnModel: all widths must be positive");
    }
    Rng rng(config.seed);
    for (std::size_t i = 0; i < learned_users.size(); ++i) {
      if (!user_rows_.emplace(learned_users[i], i).second) {
        throw Error("GnnModel: duplicate learned user '" + learned_users[i] + "'");
      }
    }
    if (!learned_users.empty()) {
      user_features_ = diff::Parameter("gnn.user_features", diff::Tensor(learned_users.size(), config.in_dim));
    }
    w1_ = diff::Parameter("gnn.sage1.w", diff::xavier_uniform(2 * config.in_dim, config.hidden_dim, rng));
    b1_ = diff::Parameter("gnn.sage1.b", diff::Tensor(1, config.hidden_dim));
    w2_ = diff::Parameter("gnn.sage2.w", diff::xavier_uniform(2 * config.hidden_dim, config.out_dim, rng));
    b2_ = diff::Parameter("gnn.sage2.b", diff::Tensor(1, config.out_dim));
    d1_ = diff::Parameter("gnn.dec1.w", diff::xavier_uniform(2 * config.out_dim, config.decoder_hidden, rng));
    db1_ = diff::Parameter("gnn.dec1.b", diff::Tensor(1, config.decoder_hidden));
    d2_ = diff::Parameter("gnn.dec2.w", diff::xavier_uniform(config.decoder_hidden, 1, rng));
    db2_ = diff::Parameter("gnn.dec2.b", diff::Tensor(1, 1));
    has_decoder_ = true;
  }

  const GnnConfig& config() const { return config_; }
  std::size_t out_dim() const { return config_.out_dim; }
  bool has_decoder() const { return has_decoder_; }
  const std::map<std::string, std::size_t>& learned_users() const { return user_rows_; }

  // Learned user ids in feature-row order.
  std::vector<std::string> learned_user_order() const {
    std::vector<std::string> ids(user_rows_.size());
    for (const auto& [id, row] : user_rows_) ids[row] = id;
    return ids;
  }

  // Classification head is only needed for pretraining.
  void drop_decoder() { has_decoder_ = false; }

  std::vector<diff::Parameter*> encoder_parameters() {
    std::vector<diff::Parameter*> ps;
    if (!user_rows_.empty()) ps.push_back(&user_features_);
    for (auto* p : {&w1_, &b1_, &w2_, &b2_}) ps.push_back(p);
    return ps;
  }

  std::vector<diff::Parameter*> decoder_parameters() {
    if (!has_decoder_) return {};
    return {&d1_, &db1_, &d2_, &db2_};
  }

  std::vector<diff::Parameter*> parameters() {
    auto ps = encoder_parameters();
    for (auto* p : decoder_parameters()) ps.push_back(p);
    return ps;
  }

  GraphEncoding encode_all(diff::Tape& tape, const PreferenceGraph& graph) {
    return encode_impl(*this, tape, graph);
  }
  GraphEncoding encode_all(diff::Tape& tape, const PreferenceGraph& graph) const {
    return encode_impl(*this, tape, graph);
  }

  // Logits for rows of user and attribute embeddings (n x d each -> n x 1).
  diff::Var decode_edges(diff::Tape& tape, const diff::Var& h_u, const diff::Var& h_p) {
    return decode_impl(*this, tape, h_u, h_p);
  }
  diff::Var decode_edges(diff::Tape& tape, const diff::Var& h_u, const diff::Var& h_p) const {
    return decode_impl(*this, tape, h_u, h_p);
  }

  // Embedding of one user, evaluated without gradient tracking.
  std::vector<double> encode(const PreferenceGraph& graph, const std::string& user_id) const {
    const std::size_t u = graph.user_index(user_id);
    diff::Tape tape;
    auto enc = encode_all(tape, graph);
    auto row = enc.nodes.value().row_span(enc.user_row(u));
    return {row.begin(), row.end()};
  }

  std::vector<double> encode_attribute(const PreferenceGraph& graph, const std::string& attribute_id) const {
    const std::size_t a = graph.attribute_index(attribute_id);
    diff::Tape tape;
    auto enc = encode_all(tape, graph);
    auto row = enc.nodes.value().row_span(enc.attribute_row(a));
    return {row.begin(), row.end()};
  }

  // sigma(logit) is the predicted probability that the edge is a "like".
  double decode_edge(const std::vector<double>& h_u, const std::vector<double>& h_p) const {
    if (h_u.size() != h_p.size() || h_u.size() != config_.out_dim) {
      throw ShapeError("decode_edge: embedding widths " + std::to_string(h_u.size()) + " and " +
                       std::to_string(h_p.size()) + " (expected " + std::to_string(config_.out_dim) + ")");
    }
    diff::Tape tape;
    auto u = tape.constant(diff::Tensor::row(h_u));
    auto p = tape.constant(diff::Tensor::row(h_p));
    return decode_edges(tape, u, p).item();
  }

 private:
  template <class Self>
  static GraphEncoding encode_impl(Self& self, diff::Tape& tape, const PreferenceGraph& graph) {
    using namespace diff;
    const auto& cfg = self.config_;
    if (graph.feature_dim() != cfg.in_dim) {
      throw ShapeError("GnnModel::encode: graph feature width " + std::to_string(graph.feature_dim()) +
                       " != model input width " + std::to_string(cfg.in_dim));
    }
    const std::size_t nu = graph.users().size();
    const std::size_t na = graph.attributes().size();
    if (nu + na == 0) throw Error("GnnModel::encode: empty graph");

    std::vector<Var> parts;
    if (nu > 0) {
      std::vector<std::size_t> rows(nu);
      bool any_learned = false;
      const std::size_t zero_row = self.user_rows_.size();
      for (std::size_t i = 0; i < nu; ++i) {
        const auto& u = graph.users()[i];
        auto it = self.user_rows_.find(u.id);
        if (u.feature_mode == FeatureMode::learned && it != self.user_rows_.end()) {
          rows[i] = it->second;
          any_learned = true;
        } else {
          rows[i] = zero_row;
        }
      }
      if (any_learned) {
        Var table = concat_rows({tape.param(self.user_features_), tape.constant(Tensor(1, cfg.in_dim))});
        parts.push_back(gather_rows(table, rows));
      } else {
        parts.push_back(tape.constant(Tensor(nu, cfg.in_dim)));
      }
    }
    if (na > 0) {
      Tensor feats(na, cfg.in_dim);
      for (std::size_t a = 0; a < na; ++a) {
        const auto& f = graph.attributes()[a].feature;
        std::copy(f.begin(), f.end(), feats.row_span(a).begin());
      }
      parts.push_back(tape.constant(std::move(feats)));
    }
    Var x = parts.size() == 1 ? parts[0] : concat_rows(std::span<const Var>(parts));
    const auto adj = graph.adjacency();
    Var h1 = relu(linear(concat_cols(x, neighbor_mean(x, adj)), tape.param(self.w1_), tape.param(self.b1_)));
    Var h2 = linear(concat_cols(h1, neighbor_mean(h1, adj)), tape.param(self.w2_), tape.param(self.b2_));
    return {h2, nu};
  }

  template <class Self>
  static diff::Var decode_impl(Self& self, diff::Tape& tape, const diff::Var& h_u, const diff::Var& h_p) {
    using namespace diff;
    if (!self.has_decoder_) throw Error("GnnModel: decoder was dropped");
    if (h_u.cols() != self.config_.out_dim || h_p.cols() != self.config_.out_dim || h_u.rows() != h_p.rows()) {
      throw ShapeError("decode_edge: embeddings " + h_u.value().shape_string() + " and " +
                       h_p.value().shape_string() + " (expected width " + std::to_string(self.config_.out_dim) + ")");
    }
    Var hidden = relu(linear(concat_cols(h_u, h_p), tape.param(self.d1_), tape.param(self.db1_)));
    return linear(hidden, tape.param(self.d2_), tape.param(self.db2_));
  }

  GnnConfig config_;
  std::map<std::string, std::size_t> user_rows_;
  diff::Parameter user_features_;
  diff::Parameter w1_, b1_, w2_, b2_;
  diff::Parameter d1_, db1_, d2_, db2_;
  bool has_decoder_ = false;
};

struct EdgeMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct PretrainResult {
  GnnModel model;  // parameters from the best validation epoch
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
  std::vector<double> val_loss;
  int best_epoch = -1;
  EdgeMetrics best_val;
  EdgeMetrics test;
};

namespace detail {

struct EdgeBatch {
  std::vector<std::size_t> user_rows;
  std::vector<std::size_t> attribute_rows;
  std::vector<double> signs;  // +1 for dislike (label 0), -1 for like (label 1)
  std::vector<Polarity> labels;
};

inline EdgeBatch edge_batch(const PreferenceGraph& g, const std::vector<std::size_t>& edges) {
  EdgeBatch b;
  const std::size_t nu = g.users().size();
  for (std::size_t e : edges) {
    const auto& edge = g.edges().at(e);
    b.user_rows.push_back(g.user_index(edge.user_id));
    b.attribute_rows.push_back(nu + g.attribute_index(edge.attribute_id));
    b.signs.push_back(edge.polarity == Polarity::like ? -1.0 : 1.0);
    b.labels.push_back(edge.polarity);
  }
  return b;
}

// Mean binary cross-entropy of the logits against like=1 / dislike=0.
inline diff::Var edge_bce(diff::Tape& tape, const diff::Var& logits, const EdgeBatch& b) {
  using namespace diff;
  Var signs = tape.constant(Tensor(b.signs.size(), 1, b.signs));
  return scale(sum(softplus(mul(logits, signs))), 1.0 / static_cast<double>(b.signs.size()));
}

template <class Model>
EdgeMetrics evaluate_edges(Model& model, const PreferenceGraph& message_graph, const EdgeBatch& batch) {
  diff::Tape tape;
  tape.set_grad_enabled(false);
  auto enc = model.encode_all(tape, message_graph);
  auto logits = model.decode_edges(tape, diff::gather_rows(enc.nodes, batch.user_rows),
                                   diff::gather_rows(enc.nodes, batch.attribute_rows));
  EdgeMetrics m;
  m.loss = edge_bce(tape, logits, batch).item();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const bool pred_like = logits.value()[i] > 0.0;
    correct += pred_like == (batch.labels[i] == Polarity::like);
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(batch.labels.size());
  return m;
}

}  // namespace detail

// Full-batch Adam on the BCE of training-edge polarity. Messages pass over
// training edges only; the returned model holds the parameters of the epoch
// with the best validation accuracy (ties: lower validation loss).
inline PretrainResult pretrain(const PreferenceGraph& graph, const EdgeSplit& split, const GnnConfig& config) {
  if (split.train.empty() || split.val.empty()) throw Error("pretrain: empty train or validation split");
  bool has_like = false, has_dislike = false;
  for (std::size_t e : split.train) {
    (graph.edges().at(e).polarity == Polarity::like ? has_like : has_dislike) = true;
  }
  if (!has_like || !has_dislike) {
    throw Error("pretrain: training edges contain a single polarity class; need both like and dislike edges");
  }

  std::vector<std::string> learned;
  for (const auto& u : graph.users())
    if (u.feature_mode == FeatureMode::learned) learned.push_back(u.id);

  PretrainResult result;
  GnnModel model(config, learned);
  const PreferenceGraph message_graph = graph.with_edges(split.train);
  // with_edges keeps the order of split.train, so edge i of the message
  // graph is split.train[i].
  std::vector<std::size_t> train_ids(split.train.size());
  std::iota(train_ids.begin(), train_ids.end(), std::size_t{0});
  const auto train = detail::edge_batch(message_graph, train_ids);
  const auto val = detail::edge_batch(graph, split.val);
  const auto test = detail::edge_batch(graph, split.test.empty() ? split.val : split.test);

  AdamW opt({.weight_decay = 0.0});
  auto params = model.parameters();
  std::optional<GnnModel> best;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (auto* p : params) p->zero_grad();
    {
      diff::Tape tape;
      auto enc = model.encode_all(tape, message_graph);
      auto logits = model.decode_edges(tape, diff::gather_rows(enc.nodes, train.user_rows),
                                       diff::gather_rows(enc.nodes, train.attribute_rows));
      auto loss = detail::edge_bce(tape, logits, train);
      result.train_loss.push_back(loss.item());
      tape.backward(loss);
    }
    opt.step(params, config.lr);

    const auto v = detail::evaluate_edges(model, message_graph, val);
    result.val_accuracy.push_back(v.accuracy);
    result.val_loss.push_back(v.loss);
    const bool better = !best || v.accuracy > result.best_val.accuracy ||
                        (v.accuracy == result.best_val.accuracy && v.loss < result.best_val.loss);
    if (better) {
      best = model;
      result.best_val = v;
      result.best_epoch = epoch;
    }
  }
  result.model = best ? *best : model;
  result.test = detail::evaluate_edges(result.model, message_graph, test);
  return result;
}

// Adds the user to `graph` as a zero-feature node wired to its attributes and
// runs the encoder. The model is never modified.
inline UserEmbedding embed_new_user(PreferenceGraph& graph, const GnnModel& model,
                                    const std::vector<std::string>& likes,
                                    const std::vector<std::string>& dislikes,
                                    const std::string& user_id = {}) {
  std::string id = user_id;
  if (id.empty()) {
    id = graph.add_user(likes, dislikes);
  } else {
    graph.add_user(id, FeatureMode::zero, likes, dislikes);
  }
  return {id, model.encode(graph, id)};
}

}  // namespace cdpo
