#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "cdpo/dpo.hpp"
#include "gradcheck.hpp"

using namespace cdpo;

namespace {

PolicyConfig tiny(std::uint64_t seed) {
  PolicyConfig c;
  c.vocab_size = 12;
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

TokenTuple random_tuple(Rng& rng, const std::string& user) {
  TokenTuple t;
  t.user = user;
  t.caption = {4 + rng.index(8), 4 + rng.index(8)};
  t.cue = {4 + rng.index(8)};
  const std::size_t len = 1 + rng.index(3);
  for (std::size_t i = 0; i < len; ++i) {
    t.chosen.push_back(4 + rng.index(8));
    t.rejected.push_back(4 + rng.index(8));
  }
  if (t.chosen == t.rejected) t.rejected.push_back(5);
  return t;
}

// Users u0..u{n-1} over attributes a0..a5, random polarity edges.
PreferenceGraph random_graph(Rng& rng, int users) {
  PreferenceGraph g;
  for (int a = 0; a < 6; ++a) g.add_attribute("a" + std::to_string(a), "attr " + std::to_string(a));
  for (int u = 0; u < users; ++u) {
    std::vector<std::string> likes, dislikes;
    for (int a = 0; a < 6; ++a) {
      const double x = rng.uniform();
      if (x < 0.4) likes.push_back("a" + std::to_string(a));
      else if (x < 0.7) dislikes.push_back("a" + std::to_string(a));
    }
    g.add_user("u" + std::to_string(u), FeatureMode::learned, likes, dislikes);
  }
  return g;
}

std::map<std::string, std::vector<double>> random_embeddings(Rng& rng, const PreferenceGraph& g, std::size_t dim) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& u : g.users()) {
    std::vector<double> h(dim);
    for (auto& x : h) x = rng.normal();
    out[u.id] = h;
  }
  return out;
}

SoftFn soft_from(const PolicyModel::Forward& f, const std::map<std::string, std::vector<double>>& embeds) {
  return [&f, &embeds](const std::string& id) -> std::optional<diff::Var> { return f.soft_tokens(embeds.at(id)); };
}

// Perturbs every parameter so the policy and the reference disagree.
void jitter(PolicyModel& m, Rng& rng, double s) {
  for (auto* p : m.parameters())
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] += s * rng.normal();
}

}  // namespace

TEST(Dpo, Defaults) {
  DpoConfig c;
  EXPECT_DOUBLE_EQ(c.lambda, 0.15);
  EXPECT_EQ(c.k, 3u);
  EXPECT_DOUBLE_EQ(c.beta, 0.1);
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c.beta = 0.1;
  c.lambda = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Dpo, EqualChosenRejectedRejected) {
  Vocabulary v({"a", "bowl", "red", "paint"});
  EXPECT_THROW(tokenize(v, {"u", "a bowl", "paint", "paint a red bowl", "paint a red bowl"}), Error);
  EXPECT_NO_THROW(tokenize(v, {"u", "a bowl", "paint", "paint a red bowl", "paint a bowl"}));
}

TEST(Dpo, ScalarLossValues) {
  EXPECT_NEAR(dpo_loss(1.3, 1.3, 0.1), std::log(2.0), 1e-15);
  EXPECT_NEAR(dpo_loss(2.0, 0.0, 1.0), std::log1p(std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(dpo_loss(2.0, 0.0, 1.0), 0.126928011, 1e-9);
  double prev = INFINITY;
  for (double d = -30.0; d <= 30.0; d += 0.5) {
    const double l = dpo_loss(d, 0.0, 0.7);
    EXPECT_LT(l, prev);
    EXPECT_GT(l, 0.0);
    prev = l;
  }
}

TEST(Dpo, CombineExample) {
  EXPECT_NEAR(cdpo_combine(0.7, {{0.5, 0.3}}, 0.15), 0.745, 1e-15);
  EXPECT_EQ(cdpo_combine(0.7, {}, 0.15), 0.7);
  EXPECT_EQ(cdpo_combine(0.7, {{0.5, 0.3}}, 0.0), 0.7);
}

TEST(Dpo, DeltaDeterministicAndUniformZero) {
  PolicyModel m(tiny(1));
  Rng rng(2);
  auto t = random_tuple(rng, "u0");
  const UserVector h = std::vector<double>{0.1, -0.2, 0.3};
  EXPECT_EQ(delta(m, h, t), delta(m, h, t));
  for (auto* p : m.policy_parameters())
    if (p->name.starts_with("policy.out")) p->value.fill(0.0);
  t.chosen = {4, 5};
  t.rejected = {6, 7};
  EXPECT_EQ(delta(m, h, t), 0.0);
}

TEST(Dpo, LambdaZeroIsPlainDpo) {
  Rng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    PolicyModel ref(tiny(trial));
    PolicyModel pol = ref;
    jitter(pol, rng, 0.2);
    auto g = random_graph(rng, 5);
    auto embeds = random_embeddings(rng, g, 3);
    auto t = random_tuple(rng, "u" + std::to_string(rng.index(5)));
    const double dref = reference_delta(ref, t);
    diff::Tape tape;
    auto f = pol.forward(tape);
    auto soft = soft_from(f, embeds);
    auto terms = cdpo_loss(f, pol.config(), t, dref, g, soft, {.beta = 0.1, .lambda = 0.0, .k = 3});
    const double plain = dpo_loss(delta(pol, embeds.at(t.user), t), dref, 0.1);
    EXPECT_LE(std::abs(terms.loss.item() - plain), 1e-12);
  }
}

TEST(Dpo, CollaborativeTermIsConvexCombination) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    PolicyModel ref(tiny(trial + 50));
    PolicyModel pol = ref;
    jitter(pol, rng, 0.3);
    auto g = random_graph(rng, 8);
    auto embeds = random_embeddings(rng, g, 3);
    auto t = random_tuple(rng, "u0");
    const double dref = reference_delta(ref, t);
    const DpoConfig cfg{.beta = 0.5, .lambda = 0.4, .k = 3};
    diff::Tape tape;
    auto f = pol.forward(tape);
    auto terms = cdpo_loss(f, pol.config(), t, dref, g, soft_from(f, embeds), cfg);

    const auto nb = g.k_nearest("u0", 3);
    std::vector<std::pair<double, double>> weighted;
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& n : nb) {
      const double l = dpo_loss(delta(pol, embeds.at(n.id), t), dref, cfg.beta);
      weighted.emplace_back(n.weight, l);
      lo = std::min(lo, l);
      hi = std::max(hi, l);
    }
    const double own = dpo_loss(delta(pol, embeds.at("u0"), t), dref, cfg.beta);
    EXPECT_NEAR(terms.loss.item(), cdpo_combine(own, weighted, cfg.lambda), 1e-12);
    if (nb.empty()) {
      EXPECT_EQ(terms.collaborative, 0.0);
    } else {
      EXPECT_GE(terms.collaborative, cfg.lambda * lo - 1e-12);
      EXPECT_LE(terms.collaborative, cfg.lambda * hi + 1e-12);
    }
  }
}

TEST(Dpo, IdenticalNeighbourEmbeddingsCollapse) {
  Rng rng(5);
  PolicyModel ref(tiny(9));
  PolicyModel pol = ref;
  jitter(pol, rng, 0.3);
  auto g = random_graph(rng, 6);
  std::map<std::string, std::vector<double>> same;
  for (const auto& u : g.users()) same[u.id] = {0.4, -0.1, 0.9};
  const DpoConfig cfg{.beta = 0.3, .lambda = 0.15, .k = 3};
  for (const auto& u : g.users()) {
    if (g.k_nearest(u.id, 3).empty()) continue;
    auto t = random_tuple(rng, u.id);
    const double dref = reference_delta(ref, t);
    diff::Tape tape;
    auto f = pol.forward(tape);
    auto terms = cdpo_loss(f, pol.config(), t, dref, g, soft_from(f, same), cfg);
    EXPECT_NEAR(terms.loss.item(), (1.0 + cfg.lambda) * terms.individual, 1e-10);
  }
}

TEST(Dpo, IsolatedUserFallsBack) {
  Rng rng(6);
  PolicyModel pol(tiny(3));
  PreferenceGraph g;
  g.add_attribute("a", "a");
  g.add_attribute("b", "b");
  g.add_user("x", FeatureMode::learned, {"a"}, {});
  g.add_user("y", FeatureMode::learned, {}, {"b"});
  std::map<std::string, std::vector<double>> e = {{"x", {1, 2, 3}}, {"y", {3, 2, 1}}};
  auto t = random_tuple(rng, "x");
  diff::Tape tape;
  auto f = pol.forward(tape);
  auto terms = cdpo_loss(f, pol.config(), t, 0.25, g, soft_from(f, e), {});
  EXPECT_EQ(terms.neighbors, 0u);
  EXPECT_EQ(terms.collaborative, 0.0);
  EXPECT_EQ(terms.loss.item(), terms.individual);
}

TEST(Dpo, PolicyEqualsReferenceGivesLn2) {
  Rng rng(7);
  PolicyModel ref(tiny(11));
  const PolicyModel pol = ref;
  for (int i = 0; i < 50; ++i) {
    auto t = random_tuple(rng, "u");
    const double l = dpo_loss(delta(pol, std::nullopt, t), reference_delta(ref, t), 0.1);
    EXPECT_NEAR(l, 0.693147180559945, 1e-9);
  }
}

TEST(Dpo, NonFiniteNamesTuple) {
  PolicyModel pol(tiny(12));
  pol.policy_parameters()[0]->value.fill(NAN);
  Rng rng(1);
  auto t = random_tuple(rng, "broken-user");
  PreferenceGraph g;
  g.add_attribute("a", "a");
  g.add_user("broken-user", FeatureMode::learned, {"a"}, {});
  diff::Tape tape;
  auto f = pol.forward(tape);
  try {
    cdpo_loss(f, pol.config(), t, 0.0, g, [](const std::string&) { return std::optional<diff::Var>{}; }, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("broken-user"), std::string::npos);
  }
}

TEST(Dpo, CdpoGradcheck) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed + 20);
    PolicyModel ref(tiny(seed));
    PolicyModel pol = ref;
    jitter(pol, rng, 0.2);
    PreferenceGraph g;
    g.add_attribute("a", "a");
    g.add_attribute("b", "b");
    g.add_user("p", FeatureMode::learned, {"a"}, {"b"});
    g.add_user("q", FeatureMode::learned, {"a"}, {"b"});
    auto embeds = random_embeddings(rng, g, 3);
    auto t = random_tuple(rng, "p");
    const double dref = reference_delta(ref, t);
    const DpoConfig cfg{.beta = 1.0, .lambda = 0.5, .k = 3};
    auto params = pol.parameters();
    const auto r = test_support::gradcheck(params, [&](diff::Tape& tape) {
      auto f = pol.forward(tape);
      return cdpo_loss(f, pol.config(), t, dref, g, soft_from(f, embeds), cfg).loss;
    });
    EXPECT_GT(r.analytic_norm, 0.0);
    EXPECT_LE(r.rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Dpo, BatchMean) {
  Rng rng(8);
  PolicyModel ref(tiny(21));
  PolicyModel pol = ref;
  jitter(pol, rng, 0.3);
  auto g = random_graph(rng, 6);
  auto embeds = random_embeddings(rng, g, 3);
  std::vector<TokenTuple> tuples;
  for (int i = 0; i < 5; ++i) tuples.push_back(random_tuple(rng, "u" + std::to_string(i)));
  std::vector<double> refs;
  for (const auto& t : tuples) refs.push_back(reference_delta(ref, t));
  const DpoConfig cfg;

  auto run = [&](const std::vector<std::size_t>& order) {
    std::vector<const TokenTuple*> batch;
    std::vector<double> r;
    for (std::size_t i : order) {
      batch.push_back(&tuples[i]);
      r.push_back(refs[i]);
    }
    diff::Tape tape;
    auto f = pol.forward(tape);
    auto b = batch_loss(f, pol.config(), batch, r, g, soft_from(f, embeds), cfg);
    return std::make_pair(b.loss.item(), b.per_tuple);
  };

  const auto [mean, per] = run({0, 1, 2, 3, 4});
  double oracle = 0.0;
  for (double x : per) oracle += x;
  EXPECT_NEAR(mean, oracle / 5.0, 1e-15);
  EXPECT_NEAR(run({4, 2, 0, 3, 1}).first, mean, 1e-12);

  diff::Tape tape;
  auto f = pol.forward(tape);
  auto one = batch_loss(f, pol.config(), {&tuples[2]}, {refs[2]}, g, soft_from(f, embeds), cfg);
  auto single = cdpo_loss(f, pol.config(), tuples[2], refs[2], g, soft_from(f, embeds), cfg);
  EXPECT_EQ(one.loss.item(), single.loss.item());
  EXPECT_THROW(batch_loss(f, pol.config(), {}, {}, g, soft_from(f, embeds), cfg), Error);
}
