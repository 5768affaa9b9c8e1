#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cdpo/policy.hpp"
#include "gradcheck.hpp"

using namespace cdpo;

namespace {

PolicyConfig tiny(std::size_t vocab, std::uint64_t seed = 1) {
  PolicyConfig c;
  c.vocab_size = vocab;
  c.d_model = 4;
  c.heads = 2;
  c.ff_dim = 6;
  c.max_len = 24;
  c.soft_tokens = 2;
  c.user_dim = 3;
  c.projector_hidden = 4;
  c.projector_init_scale = 1.0;
  c.seed = seed;
  return c;
}

PolicyConfig desk(std::size_t vocab) {
  PolicyConfig c;
  c.vocab_size = vocab;
  c.seed = 5;
  return c;
}

double logsumexp_row(const diff::Tensor& t, std::size_t r) {
  double m = -INFINITY, z = 0.0;
  for (double v : t.row_span(r)) m = std::max(m, v);
  for (double v : t.row_span(r)) z += std::exp(v - m);
  return m + std::log(z);
}

}  // namespace

TEST(Vocabulary, ReservedIdsFixed) {
  Vocabulary v({"zebra", "apple", "apple"});
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.token(kPad), "<pad>");
  EXPECT_EQ(v.token(kBos), "<bos>");
  EXPECT_EQ(v.token(kEos), "<eos>");
  EXPECT_EQ(v.token(kSep), "<sep>");
  EXPECT_EQ(v.id("apple"), 4u);
  EXPECT_EQ(v.id("zebra"), 5u);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(i)), i);
}

TEST(Vocabulary, EncodeDecode) {
  Vocabulary v({"a", "red", "bowl", "paint"});
  const auto ids = v.encode("paint  a red\tbowl");
  EXPECT_EQ(v.decode(ids), "paint a red bowl");
  auto with_reserved = ids;
  with_reserved.push_back(kEos);
  EXPECT_EQ(v.decode(with_reserved), "paint a red bowl");
  EXPECT_THROW(v.encode("paint a blue bowl"), LookupError);
  EXPECT_THROW(v.token(99), LookupError);
}

TEST(Vocabulary, JsonRoundTrip) {
  Vocabulary v({"b", "a", "c"});
  const auto path = std::filesystem::temp_directory_path() / "cdpo_vocab_test.json";
  v.save(path.string());
  const auto back = Vocabulary::load(path.string());
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.dump(), v.dump());
  std::filesystem::remove(path);
  EXPECT_THROW(Vocabulary::from_json(nlohmann::json::array({"a", "b"})), FormatError);
  EXPECT_THROW(Vocabulary::from_json(nlohmann::json::array({"<pad>", "<bos>", "<eos>", "<sep>", "b", "a"})),
               FormatError);
  EXPECT_THROW(Vocabulary({"<x>"}), FormatError);
}

TEST(Policy, LayoutWithAndWithoutSoftTokens) {
  const auto cfg = desk(40);
  const std::vector<std::size_t> cap = {10, 11}, cue = {12}, y = {20, 21, 22};
  const auto plain = encode_input(cfg, false, cap, cue, y);
  const auto soft = encode_input(cfg, true, cap, cue, y);
  EXPECT_EQ(soft.length(), plain.length() + cfg.soft_tokens);
  const std::vector<std::size_t> want = {kBos, 10, 11, kSep, 12, kSep, 20, 21, 22, kEos};
  EXPECT_EQ(plain.tokens, want);

  const auto mask = soft.target_mask();
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++count;
    EXPECT_GE(i, soft.length() - y.size() - 1);
  }
  EXPECT_EQ(count, y.size() + 1);
}

TEST(Policy, LayoutErrors) {
  auto cfg = desk(40);
  cfg.max_len = 12;
  EXPECT_THROW(encode_input(cfg, false, {}, {5}, {6}), Error);
  EXPECT_THROW(encode_input(cfg, false, {5}, {5}, {}), Error);
  EXPECT_NO_THROW(encode_input(cfg, false, {5}, {5}, {6, 6, 6, 6, 6, 6}));
  EXPECT_THROW(encode_input(cfg, false, {5}, {5}, {6, 6, 6, 6, 6, 6, 6}), Error);
  EXPECT_THROW(encode_input(cfg, true, {5}, {5}, {6}), Error);
  EXPECT_THROW(encode_input(cfg, false, {5}, {5}, {40}), LookupError);
}

TEST(Policy, EmbeddingDeterministic) {
  PolicyModel m(desk(30));
  const UserVector h = std::vector<double>(32, 0.25);
  const auto s = encode_input(m, h, {5, 6}, {7}, {8, 9});
  EXPECT_EQ(embedded_sequence(m, h, s), embedded_sequence(m, h, s));
  const auto e = embedded_sequence(m, h, s);
  EXPECT_EQ(e.rows(), s.length());
  EXPECT_EQ(e.cols(), 32u);
}

TEST(Policy, SoftTokenShape) {
  PolicyModel m(desk(30));
  diff::Tape tape;
  auto f = m.forward(tape);
  auto soft = f.soft_tokens(std::vector<double>(32, 1.0));
  EXPECT_EQ(soft.rows(), 8u);
  EXPECT_EQ(soft.cols(), 32u);
  EXPECT_THROW(f.soft_tokens(std::vector<double>(31, 1.0)), ShapeError);
}

TEST(Policy, UniformLogitsGiveUniformLogprob) {
  PolicyModel m(desk(50));
  for (auto* p : m.policy_parameters()) {
    if (p->name.starts_with("policy.out")) p->value.fill(0.0);
  }
  const auto s = encode_input(m, std::nullopt, {5, 6}, {7}, {8, 9, 10});
  EXPECT_NEAR(sequence_logprob(m, std::nullopt, s), 4.0 * std::log(1.0 / 50.0), 1e-12);
  EXPECT_NEAR(sequence_logprob(m, std::nullopt, s), -15.6481, 5e-5);
}

TEST(Policy, LogprobNonPositive) {
  PolicyModel m(desk(30));
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    std::vector<std::size_t> y(1 + rng.index(6));
    for (auto& t : y) t = 4 + rng.index(26);
    UserVector h;
    if (i % 2) {
      h = std::vector<double>(32);
      for (auto& x : *h) x = rng.normal();
    }
    const auto s = encode_input(m, h, {4 + rng.index(26)}, {4 + rng.index(26)}, y);
    EXPECT_LE(sequence_logprob(m, h, s), 0.0);
  }
}

TEST(Policy, SingleTokenTargetsSumBelowOne) {
  PolicyModel m(tiny(10, 4));
  double total = 0.0;
  for (std::size_t t = 0; t < 10; ++t) {
    const auto s = encode_input(m, std::nullopt, {5}, {6}, {t});
    total += std::exp(sequence_logprob(m, std::nullopt, s));
  }
  EXPECT_LE(total, 1.0 + 1e-12);
  EXPECT_GT(total, 0.0);
}

TEST(Policy, RowsNormalised) {
  PolicyModel m(desk(30));
  const UserVector h = std::vector<double>(32, -0.5);
  const auto s = encode_input(m, h, {5, 6}, {7}, {8, 9, 10});
  diff::Tape tape;
  auto f = m.forward(tape);
  auto lp = f.all_logprobs(s, f.soft_tokens(*h)).value();
  for (std::size_t r = 0; r < lp.rows(); ++r) EXPECT_NEAR(logsumexp_row(lp, r), 0.0, 1e-9);
}

TEST(Policy, Causal) {
  PolicyModel m(desk(30));
  for (const UserVector& h : {UserVector{}, UserVector{std::vector<double>(32, 0.7)}}) {
    const auto s = encode_input(m, h, {5, 6}, {7}, {8, 9, 10, 11});
    for (std::size_t j = 1; j < s.tokens.size(); ++j) {
      auto t = s;
      t.tokens[j] = t.tokens[j] == 20 ? 21 : 20;
      diff::Tape ta, tb;
      auto fa = m.forward(ta);
      auto fb = m.forward(tb);
      std::optional<diff::Var> sa, sb;
      if (h) {
        sa = fa.soft_tokens(*h);
        sb = fb.soft_tokens(*h);
      }
      const auto a = fa.all_logprobs(s, sa).value();
      const auto b = fb.all_logprobs(t, sb).value();
      for (std::size_t r = 0; r < j; ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) ASSERT_EQ(a(r, c), b(r, c)) << "row " << r << " token " << j;
      bool changed = false;
      for (std::size_t c = 0; c < a.cols(); ++c) changed |= a(j, c) != b(j, c);
      EXPECT_TRUE(changed);
    }
  }
}

TEST(Policy, SoftTokensCarryUserIdentity) {
  PolicyModel m(desk(30));
  const UserVector a = std::vector<double>(32, 1.0);
  UserVector b = a;
  (*b)[3] = -1.0;
  const auto s = encode_input(m, a, {5}, {6}, {7, 8});
  EXPECT_NE(embedded_sequence(m, a, s), embedded_sequence(m, b, s));
  const UserVector a2 = a;
  EXPECT_EQ(sequence_logprob(m, a, s), sequence_logprob(m, a2, s));
}

TEST(Policy, GreedyAndSamplingDecode) {
  PolicyModel m(desk(30));
  const UserVector h = std::vector<double>(32, 0.3);
  const auto g1 = decode(m, h, {5, 6}, {7});
  const auto g2 = decode(m, h, {5, 6}, {7});
  EXPECT_EQ(g1, g2);
  EXPECT_LE(g1.size() + 6 + 8, m.config().max_len);

  DecodeOptions cold{.temperature = 1e-6, .seed = 9};
  EXPECT_EQ(decode(m, h, {5, 6}, {7}, cold), g1);

  DecodeOptions warm{.temperature = 1.0, .seed = 4};
  EXPECT_EQ(decode(m, h, {5, 6}, {7}, warm), decode(m, h, {5, 6}, {7}, warm));
}

TEST(Policy, DecodeStopsAtEos) {
  PolicyModel m(desk(30));
  for (auto* p : m.policy_parameters()) {
    if (p->name == "policy.out.b") p->value(0, kEos) = 50.0;
  }
  EXPECT_TRUE(decode(m, std::nullopt, {5}, {6}).empty());
}

TEST(Policy, SequenceLogprobGradcheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PolicyModel m(tiny(9, seed));
    Rng rng(seed + 100);
    std::vector<double> h(3);
    for (auto& x : h) x = rng.normal();
    const auto s = encode_input(m.config(), true, {4, 5}, {6}, {7, 8, 4});
    auto params = m.parameters();
    const auto r = test_support::gradcheck(params, [&](diff::Tape& tape) {
      auto f = m.forward(tape);
      return f.sequence_logprob(s, f.soft_tokens(h));
    });
    EXPECT_GT(r.analytic_norm, 0.0);
    EXPECT_LE(r.rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Policy, ProjectorInitIsSmall) {
  PolicyModel m(desk(30));
  diff::Tape tape;
  auto f = m.forward(tape);
  auto soft = f.soft_tokens(std::vector<double>(32, 1.0)).value();
  double mx = 0.0;
  for (double x : soft.data()) mx = std::max(mx, std::abs(x));
  EXPECT_LT(mx, 0.05);
}
