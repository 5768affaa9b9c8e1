#pragma once

// One JSON document configures a whole run. Missing keys keep their
// defaults; unknown keys are errors.

#include <cstdint>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/datagen.hpp"
#include "cdpo/dpo.hpp"
#include "cdpo/eval.hpp"
#include "cdpo/gnn.hpp"
#include "cdpo/policy.hpp"
#include "cdpo/trainer.hpp"

namespace cdpo {

struct TrainSection {
  SftConfig sft;
  CdpoConfig cdpo;  // dpo and seed fields are filled from the run config
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  std::size_t feature_dim = kAttributeDim;  // "graph" section
  FeatureMode user_features = FeatureMode::zero;
  GnnConfig gnn;
  PolicyConfig policy;  // vocab_size and user_dim are derived
  DpoConfig dpo;
  TrainSection train;
  BenchmarkConfig eval;

  RunConfig() {
    data.n_captions = 4;
    data.pairs_per_caption = 1;
    gnn.epochs = 150;
    gnn.lr = 1e-2;
    dpo.beta = 2.0;
    train.sft.epochs = 24;
    train.sft.batch_size = 16;
    train.sft.lr = 1e-2;
    train.cdpo.steps = 300;
    train.cdpo.batch_size = 12;
    train.cdpo.lr_policy = 1e-3;
    train.cdpo.lr_gnn = 1e-3;
  }

  // Stage configs with seeds and derived widths filled in.
  DataConfig data_config() const {
    auto c = data;
    c.seed = seed;
    return c;
  }
  GnnConfig gnn_config() const {
    auto c = gnn;
    c.in_dim = feature_dim;
    c.seed = seed;
    return c;
  }
  PolicyConfig policy_config(std::size_t vocab_size) const {
    auto c = policy;
    c.vocab_size = vocab_size;
    c.user_dim = gnn.out_dim;
    c.seed = seed;
    return c;
  }
  SftConfig sft_config() const {
    auto c = train.sft;
    c.seed = seed;
    return c;
  }
  CdpoConfig cdpo_config() const {
    auto c = train.cdpo;
    c.dpo = dpo;
    c.seed = seed;
    return c;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: '" + where + "' must be an object");
  std::set<std::string> k(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!k.contains(key)) throw FormatError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw FormatError("config: bad value for '" + where + "." + key + "'");
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using J = nlohmann::ordered_json;
  J conditions = J::array();
  for (auto cond : c.eval.conditions) conditions.push_back(condition_name(cond));
  return J{{"seed", c.seed},
           {"data",
            {{"train_users", c.data.train_users},
             {"test_users", c.data.test_users},
             {"n_captions", c.data.n_captions},
             {"pairs_per_caption", c.data.pairs_per_caption},
             {"likes", c.data.persona.likes},
             {"dislikes", c.data.persona.dislikes},
             {"bias", c.data.persona.bias}}},
           {"graph", {{"feature_dim", c.feature_dim}, {"user_features", to_string(c.user_features)}}},
           {"gnn",
            {{"hidden_dim", c.gnn.hidden_dim},
             {"out_dim", c.gnn.out_dim},
             {"decoder_hidden", c.gnn.decoder_hidden},
             {"epochs", c.gnn.epochs},
             {"lr", c.gnn.lr}}},
           {"policy",
            {{"d_model", c.policy.d_model},
             {"heads", c.policy.heads},
             {"ff_dim", c.policy.ff_dim},
             {"max_len", c.policy.max_len},
             {"soft_tokens", c.policy.soft_tokens},
             {"projector_hidden", c.policy.projector_hidden},
             {"projector_init_scale", c.policy.projector_init_scale}}},
           {"dpo", {{"beta", c.dpo.beta}, {"lambda", c.dpo.lambda}, {"k", c.dpo.k}}},
           {"train",
            {{"sft",
              {{"epochs", c.train.sft.epochs},
               {"batch_size", c.train.sft.batch_size},
               {"lr", c.train.sft.lr},
               {"cosine", c.train.sft.cosine},
               {"clip", c.train.sft.clip},
               {"soft_slots", c.train.sft.soft_slots}}},
             {"cdpo",
              {{"steps", c.train.cdpo.steps},
               {"batch_size", c.train.cdpo.batch_size},
               {"lr_policy", c.train.cdpo.lr_policy},
               {"lr_gnn", c.train.cdpo.lr_gnn},
               {"cosine", c.train.cdpo.cosine},
               {"clip", c.train.cdpo.clip}}}}},
           {"eval", {{"top_n", c.eval.top_n}, {"conditions", conditions}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::read;
  RunConfig c;
  check_keys(j, {"seed", "data", "graph", "gnn", "policy", "dpo", "train", "eval"}, "");
  read(j, "seed", c.seed, "");
  if (j.contains("data")) {
    const auto& s = j["data"];
    check_keys(s, {"train_users", "test_users", "n_captions", "pairs_per_caption", "likes", "dislikes", "bias"}, "data");
    read(s, "train_users", c.data.train_users, "data");
    read(s, "test_users", c.data.test_users, "data");
    read(s, "n_captions", c.data.n_captions, "data");
    read(s, "pairs_per_caption", c.data.pairs_per_caption, "data");
    read(s, "likes", c.data.persona.likes, "data");
    read(s, "dislikes", c.data.persona.dislikes, "data");
    read(s, "bias", c.data.persona.bias, "data");
  }
  if (j.contains("graph")) {
    check_keys(j["graph"], {"feature_dim", "user_features"}, "graph");
    read(j["graph"], "feature_dim", c.feature_dim, "graph");
    std::string mode = to_string(c.user_features);
    read(j["graph"], "user_features", mode, "graph");
    c.user_features = parse_feature_mode(mode);
  }
  if (j.contains("gnn")) {
    const auto& s = j["gnn"];
    check_keys(s, {"hidden_dim", "out_dim", "decoder_hidden", "epochs", "lr"}, "gnn");
    read(s, "hidden_dim", c.gnn.hidden_dim, "gnn");
    read(s, "out_dim", c.gnn.out_dim, "gnn");
    read(s, "decoder_hidden", c.gnn.decoder_hidden, "gnn");
    read(s, "epochs", c.gnn.epochs, "gnn");
    read(s, "lr", c.gnn.lr, "gnn");
  }
  if (j.contains("policy")) {
    const auto& s = j["policy"];
    check_keys(s, {"d_model", "heads", "ff_dim", "max_len", "soft_tokens", "projector_hidden", "projector_init_scale"},
               "policy");
    read(s, "d_model", c.policy.d_model, "policy");
    read(s, "heads", c.policy.heads, "policy");
    read(s, "ff_dim", c.policy.ff_dim, "policy");
    read(s, "max_len", c.policy.max_len, "policy");
    read(s, "soft_tokens", c.policy.soft_tokens, "policy");
    read(s, "projector_hidden", c.policy.projector_hidden, "policy");
    read(s, "projector_init_scale", c.policy.projector_init_scale, "policy");
  }
  if (j.contains("dpo")) {
    check_keys(j["dpo"], {"beta", "lambda", "k"}, "dpo");
    read(j["dpo"], "beta", c.dpo.beta, "dpo");
    read(j["dpo"], "lambda", c.dpo.lambda, "dpo");
    read(j["dpo"], "k", c.dpo.k, "dpo");
  }
  if (j.contains("train")) {
    check_keys(j["train"], {"sft", "cdpo"}, "train");
    if (j["train"].contains("sft")) {
      const auto& s = j["train"]["sft"];
      check_keys(s, {"epochs", "batch_size", "lr", "cosine", "clip", "soft_slots"}, "train.sft");
      read(s, "epochs", c.train.sft.epochs, "train.sft");
      read(s, "batch_size", c.train.sft.batch_size, "train.sft");
      read(s, "lr", c.train.sft.lr, "train.sft");
      read(s, "cosine", c.train.sft.cosine, "train.sft");
      read(s, "clip", c.train.sft.clip, "train.sft");
      read(s, "soft_slots", c.train.sft.soft_slots, "train.sft");
    }
    if (j["train"].contains("cdpo")) {
      const auto& s = j["train"]["cdpo"];
      check_keys(s, {"steps", "batch_size", "lr_policy", "lr_gnn", "cosine", "clip"}, "train.cdpo");
      read(s, "steps", c.train.cdpo.steps, "train.cdpo");
      read(s, "batch_size", c.train.cdpo.batch_size, "train.cdpo");
      read(s, "lr_policy", c.train.cdpo.lr_policy, "train.cdpo");
      read(s, "lr_gnn", c.train.cdpo.lr_gnn, "train.cdpo");
      read(s, "cosine", c.train.cdpo.cosine, "train.cdpo");
      read(s, "clip", c.train.cdpo.clip, "train.cdpo");
    }
  }
  if (j.contains("eval")) {
    const auto& s = j["eval"];
    check_keys(s, {"top_n", "conditions"}, "eval");
    read(s, "top_n", c.eval.top_n, "eval");
    if (s.contains("conditions")) {
      c.eval.conditions.clear();
      for (const auto& x : s["conditions"]) c.eval.conditions.push_back(parse_condition(x.get<std::string>()));
    }
  }
  c.dpo.validate();
  c.cdpo_config().validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  try {
    return run_config_from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
}

}  // namespace cdpo
