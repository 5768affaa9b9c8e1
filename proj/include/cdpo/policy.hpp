#pragma once

// Word-level vocabulary and a one-block causal transformer that scores and
// generates edit instructions, optionally conditioned on a user through
// soft prompt tokens projected from the user's graph embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/diffcore.hpp"
#include "cdpo/error.hpp"
#include "cdpo/rng.hpp"

namespace cdpo {

inline constexpr std::size_t kPad = 0, kBos = 1, kEos = 2, kSep = 3;

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Reserved tokens first, then the given words sorted and deduplicated.
  explicit Vocabulary(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (const char* r : {"<pad>", "<bos>", "<eos>", "<sep>"}) push(r);
    for (auto& w : words) {
      if (w.empty() || w.front() == '<') throw FormatError("Vocabulary: invalid word '" + w + "'");
      if (w.find_first_of(" \t\n") != std::string::npos) throw FormatError("Vocabulary: word with whitespace '" + w + "'");
      push(w);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw LookupError("Vocabulary: id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  bool contains(const std::string& w) const { return ids_.contains(w); }

  std::size_t id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw LookupError("Vocabulary: unknown word '" + w + "'");
    return it->second;
  }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  // Reserved tokens are dropped; words are joined by single spaces.
  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t i : ids) {
      if (i <= kSep) continue;
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string dump() const { return nlohmann::json(tokens_).dump(2) + "\n"; }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw FormatError("Vocabulary: expected a JSON list of tokens");
    auto toks = j.get<std::vector<std::string>>();
    const std::vector<std::string> reserved = {"<pad>", "<bos>", "<eos>", "<sep>"};
    if (toks.size() < 4 || !std::equal(reserved.begin(), reserved.end(), toks.begin())) {
      throw FormatError("Vocabulary: first four tokens must be <pad> <bos> <eos> <sep>");
    }
    Vocabulary v(std::vector<std::string>(toks.begin() + 4, toks.end()));
    if (v.tokens_ != toks) throw FormatError("Vocabulary: tokens must be unique and sorted after the reserved ids");
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << dump();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    return from_json(nlohmann::json::parse(in));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(const std::string& w) {
    ids_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

struct PolicyConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 32;
  std::size_t heads = 2;
  std::size_t ff_dim = 64;
  std::size_t max_len = 64;
  std::size_t soft_tokens = 8;
  std::size_t user_dim = 32;
  std::size_t projector_hidden = 64;
  double projector_init_scale = 1e-3;
  std::uint64_t seed = 0;
};

template <class Json>
void to_json(Json& j, const PolicyConfig& c) {
  j = Json{{"vocab_size", c.vocab_size},
                             {"d_model", c.d_model},
                             {"heads", c.heads},
                             {"ff_dim", c.ff_dim},
                             {"max_len", c.max_len},
                             {"soft_tokens", c.soft_tokens},
                             {"user_dim", c.user_dim},
                             {"projector_hidden", c.projector_hidden},
                             {"projector_init_scale", c.projector_init_scale},
                             {"seed", c.seed}};
}

template <class Json>
void from_json(const Json& j, PolicyConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("heads").get_to(c.heads);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("max_len").get_to(c.max_len);
  j.at("soft_tokens").get_to(c.soft_tokens);
  j.at("user_dim").get_to(c.user_dim);
  j.at("projector_hidden").get_to(c.projector_hidden);
  j.at("projector_init_scale").get_to(c.projector_init_scale);
  j.at("seed").get_to(c.seed);
}

// Token layout [soft]* BOS caption SEP cue SEP target EOS. `tokens` starts at
// BOS; soft slots have no token id.
struct Sequence {
  std::vector<std::size_t> tokens;
  std::size_t soft = 0;
  std::vector<std::size_t> targets;  // indices into `tokens`

  std::size_t length() const { return soft + tokens.size(); }

  std::vector<bool> target_mask() const {
    std::vector<bool> m(length(), false);
    for (std::size_t t : targets) m[soft + t] = true;
    return m;
  }
};

inline Sequence encode_prompt(const PolicyConfig& cfg, bool with_soft, const std::vector<std::size_t>& caption,
                              const std::vector<std::size_t>& cue) {
  if (caption.empty() || cue.empty()) throw Error("encode_input: caption and cue must be non-empty");
  Sequence s;
  s.soft = with_soft ? cfg.soft_tokens : 0;
  s.tokens.push_back(kBos);
  s.tokens.insert(s.tokens.end(), caption.begin(), caption.end());
  s.tokens.push_back(kSep);
  s.tokens.insert(s.tokens.end(), cue.begin(), cue.end());
  s.tokens.push_back(kSep);
  for (std::size_t t : s.tokens) {
    if (cfg.vocab_size != 0 && t >= cfg.vocab_size) throw LookupError("encode_input: token id out of range");
  }
  if (s.length() > cfg.max_len) {
    throw Error("encode_input: sequence length " + std::to_string(s.length()) + " exceeds max_len " +
                std::to_string(cfg.max_len));
  }
  return s;
}

inline Sequence encode_input(const PolicyConfig& cfg, bool with_soft, const std::vector<std::size_t>& caption,
                             const std::vector<std::size_t>& cue, const std::vector<std::size_t>& target) {
  if (target.empty()) throw Error("encode_input: target must be non-empty");
  Sequence s = encode_prompt(cfg, with_soft, caption, cue);
  for (std::size_t t : target) {
    if (cfg.vocab_size != 0 && t >= cfg.vocab_size) throw LookupError("encode_input: token id out of range");
    s.targets.push_back(s.tokens.size());
    s.tokens.push_back(t);
  }
  s.targets.push_back(s.tokens.size());
  s.tokens.push_back(kEos);
  if (s.length() > cfg.max_len) {
    throw Error("encode_input: sequence length " + std::to_string(s.length()) + " exceeds max_len " +
                std::to_string(cfg.max_len));
  }
  return s;
}

class PolicyModel {
 public:
  // Parameters bound to one tape.
  struct Bound {
    diff::Var tok, pos;
    diff::Var wq, bq, wk, bk, wv, bv, wo, bo;
    diff::Var f1, fb1, f2, fb2;
    diff::Var out, bout;
    diff::Var p1, pb1, p2, pb2;
  };

  class Forward;

  PolicyModel() = default;

  explicit PolicyModel(const PolicyConfig& c) : config_(c) {
    if (c.vocab_size <= kSep) throw Error("PolicyModel: vocab_size must exceed the reserved ids");
    if (c.d_model == 0 || c.heads == 0 || c.d_model % c.heads != 0) {
      throw Error("PolicyModel: d_model must be a positive multiple of heads");
    }
    if (c.ff_dim == 0 || c.max_len < 2 || c.user_dim == 0 || c.projector_hidden == 0) {
      throw Error("PolicyModel: widths must be positive");
    }
    using diff::Parameter, diff::Tensor;
    Rng rng(c.seed);
    const std::size_t d = c.d_model;
    tok_ = Parameter("policy.tok_emb", diff::normal_tensor(c.vocab_size, d, rng, 0.1));
    pos_ = Parameter("policy.pos_emb", diff::normal_tensor(c.max_len, d, rng, 0.1));
    wq_ = Parameter("policy.attn.wq", diff::xavier_uniform(d, d, rng));
    bq_ = Parameter("policy.attn.bq", Tensor(1, d));
    wk_ = Parameter("policy.attn.wk", diff::xavier_uniform(d, d, rng));
    bk_ = Parameter("policy.attn.bk", Tensor(1, d));
    wv_ = Parameter("policy.attn.wv", diff::xavier_uniform(d, d, rng));
    bv_ = Parameter("policy.attn.bv", Tensor(1, d));
    wo_ = Parameter("policy.attn.wo", diff::xavier_uniform(d, d, rng));
    bo_ = Parameter("policy.attn.bo", Tensor(1, d));
    f1_ = Parameter("policy.ff.w1", diff::xavier_uniform(d, c.ff_dim, rng));
    fb1_ = Parameter("policy.ff.b1", Tensor(1, c.ff_dim));
    f2_ = Parameter("policy.ff.w2", diff::xavier_uniform(c.ff_dim, d, rng));
    fb2_ = Parameter("policy.ff.b2", Tensor(1, d));
    out_ = Parameter("policy.out.w", diff::normal_tensor(d, c.vocab_size, rng, 0.02));
    bout_ = Parameter("policy.out.b", Tensor(1, c.vocab_size));
    p1_ = Parameter("projector.w1", diff::xavier_uniform(c.user_dim, c.projector_hidden, rng));
    pb1_ = Parameter("projector.b1", Tensor(1, c.projector_hidden));
    p2_ = Parameter("projector.w2",
                    diff::xavier_uniform(c.projector_hidden, c.soft_tokens * d, rng, c.projector_init_scale));
    pb2_ = Parameter("projector.b2", Tensor(1, c.soft_tokens * d));
  }

  const PolicyConfig& config() const { return config_; }

  std::vector<diff::Parameter*> policy_parameters() {
    return {&tok_, &pos_, &wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_, &f1_, &fb1_, &f2_, &fb2_, &out_, &bout_};
  }
  std::vector<diff::Parameter*> projector_parameters() { return {&p1_, &pb1_, &p2_, &pb2_}; }
  std::vector<diff::Parameter*> parameters() {
    auto ps = policy_parameters();
    for (auto* p : projector_parameters()) ps.push_back(p);
    return ps;
  }

  Forward forward(diff::Tape& tape);
  Forward forward(diff::Tape& tape) const;

 private:
  template <class Self>
  static Bound bind(Self& s, diff::Tape& t) {
    return {t.param(s.tok_), t.param(s.pos_), t.param(s.wq_), t.param(s.bq_), t.param(s.wk_),
            t.param(s.bk_),  t.param(s.wv_),  t.param(s.bv_), t.param(s.wo_), t.param(s.bo_),
            t.param(s.f1_),  t.param(s.fb1_), t.param(s.f2_), t.param(s.fb2_), t.param(s.out_),
            t.param(s.bout_), t.param(s.p1_), t.param(s.pb1_), t.param(s.p2_), t.param(s.pb2_)};
  }

  PolicyConfig config_;
  diff::Parameter tok_, pos_;
  diff::Parameter wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  diff::Parameter f1_, fb1_, f2_, fb2_;
  diff::Parameter out_, bout_;
  diff::Parameter p1_, pb1_, p2_, pb2_;
};

class PolicyModel::Forward {
 public:
  Forward(diff::Tape& tape, const PolicyConfig& cfg, Bound b) : tape_(&tape), cfg_(cfg), b_(b) {}

  // (1 x user_dim) -> (soft_tokens x d_model)
  diff::Var soft_tokens(const diff::Var& h_user) const {
    using namespace diff;
    if (h_user.rows() != 1 || h_user.cols() != cfg_.user_dim) {
      throw ShapeError("soft_tokens: user embedding " + h_user.value().shape_string() + ", expected width " +
                       std::to_string(cfg_.user_dim));
    }
    Var hidden = relu(linear(h_user, b_.p1, b_.pb1));
    return reshape(linear(hidden, b_.p2, b_.pb2), cfg_.soft_tokens, cfg_.d_model);
  }

  diff::Var soft_tokens(const std::vector<double>& h_user) const {
    return soft_tokens(tape_->constant(diff::Tensor::row(h_user)));
  }

  // Input rows: soft tokens (no positions) then token + position embeddings.
  diff::Var embed(const Sequence& s, const std::optional<diff::Var>& soft) const {
    using namespace diff;
    if (s.soft != (soft ? cfg_.soft_tokens : 0)) throw Error("embed: soft-token layout does not match conditioning");
    if (s.length() > cfg_.max_len) throw Error("embed: sequence exceeds max_len");
    std::vector<std::size_t> positions(s.tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    Var text = add(gather_rows(b_.tok, s.tokens), gather_rows(b_.pos, positions));
    return soft ? concat_rows({*soft, text}) : text;
  }

  diff::Var hidden(const diff::Var& x) const {
    using namespace diff;
    const std::size_t dh = cfg_.d_model / cfg_.heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = linear(x, b_.wq, b_.bq);
    Var k = linear(x, b_.wk, b_.bk);
    Var v = linear(x, b_.wv, b_.bv);
    std::optional<Var> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Var qh = slice_cols(q, h * dh, dh);
      Var kh = slice_cols(k, h * dh, dh);
      Var vh = slice_cols(v, h * dh, dh);
      Var att = softmax(causal_mask(scale(matmul(qh, transpose(kh)), inv)));
      Var oh = matmul(att, vh);
      heads = heads ? concat_cols(*heads, oh) : oh;
    }
    Var r = add(x, linear(*heads, b_.wo, b_.bo));
    Var ff = linear(relu(linear(r, b_.f1, b_.fb1)), b_.f2, b_.fb2);
    return add(r, ff);
  }

  // Log-probabilities (rows x vocab) of the token following each listed row.
  diff::Var next_logprobs(const diff::Var& h, const std::vector<std::size_t>& rows) const {
    using namespace diff;
    return log_softmax(linear(gather_rows(h, rows), b_.out, b_.bout));
  }

  // Every text position: row i predicts tokens[i + 1].
  diff::Var all_logprobs(const Sequence& s, const std::optional<diff::Var>& soft) const {
    std::vector<std::size_t> rows(s.tokens.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = s.soft + i;
    return next_logprobs(hidden(embed(s, soft)), rows);
  }

  // log pi(target EOS | prefix), summed over masked positions only.
  diff::Var sequence_logprob(const Sequence& s, const std::optional<diff::Var>& soft) const {
    using namespace diff;
    if (s.targets.empty()) throw Error("sequence_logprob: sequence has no target positions");
    std::vector<std::size_t> rows, ids;
    for (std::size_t t : s.targets) {
      rows.push_back(s.soft + t - 1);
      ids.push_back(s.tokens[t]);
    }
    return sum(pick(next_logprobs(hidden(embed(s, soft)), rows), ids));
  }

  const Bound& bound() const { return b_; }
  diff::Tape& tape() const { return *tape_; }

 private:
  diff::Tape* tape_;
  PolicyConfig cfg_;
  Bound b_;
};

inline PolicyModel::Forward PolicyModel::forward(diff::Tape& tape) { return Forward(tape, config_, bind(*this, tape)); }
inline PolicyModel::Forward PolicyModel::forward(diff::Tape& tape) const {
  return Forward(tape, config_, bind(*this, tape));
}

using UserVector = std::optional<std::vector<double>>;

inline Sequence encode_input(const PolicyModel& m, const UserVector& user, const std::vector<std::size_t>& caption,
                             const std::vector<std::size_t>& cue, const std::vector<std::size_t>& target) {
  return encode_input(m.config(), user.has_value(), caption, cue, target);
}

// Input embedding rows for inspection.
inline diff::Tensor embedded_sequence(const PolicyModel& m, const UserVector& user, const Sequence& s) {
  diff::Tape tape;
  tape.set_grad_enabled(false);
  auto f = m.forward(tape);
  std::optional<diff::Var> soft;
  if (user) soft = f.soft_tokens(*user);
  return f.embed(s, soft).value();
}

inline double sequence_logprob(const PolicyModel& m, const UserVector& user, const Sequence& s) {
  diff::Tape tape;
  tape.set_grad_enabled(false);
  auto f = m.forward(tape);
  std::optional<diff::Var> soft;
  if (user) soft = f.soft_tokens(*user);
  return f.sequence_logprob(s, soft).item();
}

struct DecodeOptions {
  double temperature = 0.0;  // 0 selects greedy
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 0;  // 0: until max_len
};

// Generated target tokens, without the closing EOS.
inline std::vector<std::size_t> decode(const PolicyModel& m, const UserVector& user,
                                       const std::vector<std::size_t>& caption, const std::vector<std::size_t>& cue,
                                       const DecodeOptions& opt = {}) {
  const auto& cfg = m.config();
  Sequence s = encode_prompt(cfg, user.has_value(), caption, cue);
  Rng rng(opt.seed);
  std::vector<std::size_t> out;
  while (s.length() < cfg.max_len && (opt.max_new_tokens == 0 || out.size() < opt.max_new_tokens)) {
    diff::Tape tape;
    tape.set_grad_enabled(false);
    auto f = m.forward(tape);
    std::optional<diff::Var> soft;
    if (user) soft = f.soft_tokens(*user);
    auto lp = f.next_logprobs(f.hidden(f.embed(s, soft)), {s.length() - 1}).value();
    std::size_t next = 0;
    if (opt.temperature <= 0.0) {
      for (std::size_t j = 1; j < lp.cols(); ++j)
        if (lp[j] > lp[next]) next = j;
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lp.cols(); ++j) mx = std::max(mx, lp[j] / opt.temperature);
      std::vector<double> w(lp.cols());
      double z = 0.0;
      for (std::size_t j = 0; j < lp.cols(); ++j) z += w[j] = std::exp(lp[j] / opt.temperature - mx);
      double u = rng.uniform() * z;
      next = lp.cols() - 1;
      for (std::size_t j = 0; j < lp.cols(); ++j) {
        if (u < w[j]) {
          next = j;
          break;
        }
        u -= w[j];
      }
    }
    if (next == kEos) break;
    out.push_back(next);
    s.tokens.push_back(next);
  }
  return out;
}

}  // namespace cdpo
