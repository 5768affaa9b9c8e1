#include <gtest/gtest.h>

#include <algorithm>
#include <cctype>
#include <sstream>

#include "cdpo/pipeline.hpp"

using namespace cdpo;

namespace {

// Independent count: lowercase, split on spaces and punctuation, then look
// every word of the phrase up in the token list.
std::size_t count_by_hand(std::string text, const std::vector<std::string>& phrases) {
  for (auto& c : text) c = std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : ' ';
  std::istringstream in(text);
  std::vector<std::string> toks{std::istream_iterator<std::string>(in), {}};
  std::size_t n = 0;
  for (const auto& p : phrases) {
    std::istringstream pin(p);
    bool all = true;
    for (std::string w; pin >> w;) all = all && std::find(toks.begin(), toks.end(), w) != toks.end();
    n += all;
  }
  return n;
}

RunConfig tiny_run(std::uint64_t seed = 3) {
  RunConfig c;
  c.seed = seed;
  c.data.train_users = 8;
  c.data.test_users = 2;
  c.data.n_captions = 1;
  c.gnn.hidden_dim = 8;
  c.gnn.out_dim = 8;
  c.gnn.decoder_hidden = 8;
  c.gnn.epochs = 5;
  c.policy.d_model = 16;
  c.policy.ff_dim = 24;
  c.policy.soft_tokens = 2;
  c.policy.projector_hidden = 8;
  c.train.sft.epochs = 1;
  c.train.cdpo.steps = 3;
  c.train.cdpo.batch_size = 4;
  return c;
}

}  // namespace

TEST(Alignment, WorkedValues) {
  EXPECT_DOUBLE_EQ(alignment_score("overlay a rainbow pastel pattern", {"rainbow", "pastel", "neon", "chrome"}, {"moss"}),
                   0.5);
  EXPECT_DOUBLE_EQ(alignment_score("add rainbow and moss accents", {"rainbow", "neon"}, {"moss", "velvet"}), 0.0);
  EXPECT_LT(alignment_score("use a velvet material", {"rainbow"}, {"velvet"}), 0.0);
  EXPECT_DOUBLE_EQ(alignment_score("use a velvet material", {"rainbow"}, {"velvet"}), -1.0);
}

TEST(Alignment, CountsFields) {
  const auto a = alignment("give a gold leaf style to the cat", {"gold leaf", "marble"}, {"neon", "chrome", "moss"});
  EXPECT_EQ(a.like_hits, 1u);
  EXPECT_EQ(a.dislike_hits, 0u);
  EXPECT_DOUBLE_EQ(a.like_rate, 0.5);
  EXPECT_DOUBLE_EQ(a.dislike_rate, 0.0);
}

TEST(Alignment, OrderAndCaseInvariant) {
  const std::vector<std::string> likes{"ocean blue", "coral reef"}, dislikes{"black lace"};
  const double s = alignment_score("place an ocean blue background behind the bus", likes, dislikes);
  EXPECT_DOUBLE_EQ(alignment_score("bus the behind background blue ocean an place", likes, dislikes), s);
  EXPECT_DOUBLE_EQ(alignment_score("PLACE AN Ocean Blue BACKGROUND behind the bus", likes, dislikes), s);
}

TEST(Alignment, WholeWordsOnly) {
  EXPECT_DOUBLE_EQ(alignment_score("neonlight", {"neon"}, {"moss"}), 0.0);
  EXPECT_DOUBLE_EQ(alignment_score("royal", {"royal blue"}, {"moss"}), 0.0);
  // A repeated mention counts once.
  EXPECT_DOUBLE_EQ(alignment_score("neon neon neon", {"neon", "chrome"}, {"moss"}), 0.5);
}

TEST(Alignment, EmptyProfileRejected) {
  EXPECT_THROW(alignment_score("anything", {}, {}), Error);
  EXPECT_NO_THROW(alignment_score("anything", {"neon"}, {}));
  EXPECT_NO_THROW(alignment_score("anything", {}, {"neon"}));
}

TEST(Alignment, MatchesIndependentCount) {
  const auto ds = generate_dataset({});
  Rng rng(17);
  const auto& pool = build_pool();
  for (const auto& p : ds.personas) {
    // Outputs that each copy a random subset of the user's attributes.
    for (int rep = 0; rep < 5; ++rep) {
      std::string text;
      const auto& t = edit_types()[rng.index(edit_types().size())];
      const auto& obj = pool.objects[rng.index(pool.objects.size())];
      for (const auto& a : p.likes)
        if (rng.uniform() < 0.5) text += instruction(t, a, obj) + ". ";
      for (const auto& a : p.dislikes)
        if (rng.uniform() < 0.3) text += instruction(t, a, obj) + ". ";
      const auto got = alignment(text, p.likes, p.dislikes);
      EXPECT_EQ(got.like_hits, count_by_hand(text, p.likes)) << text;
      EXPECT_EQ(got.dislike_hits, count_by_hand(text, p.dislikes)) << text;
      const double expect = static_cast<double>(count_by_hand(text, p.likes)) / p.likes.size() -
                            static_cast<double>(count_by_hand(text, p.dislikes)) / p.dislikes.size();
      EXPECT_DOUBLE_EQ(got.score, expect);
    }
    // Copying every liked attribute gives a like-hit rate of 1.
    std::string all;
    for (const auto& a : p.likes) all += "add " + a + " accents. ";
    EXPECT_DOUBLE_EQ(alignment(all, p.likes, p.dislikes).like_rate, 1.0);
  }
}

TEST(NeighborAlignment, IsolatedUserScoresZero) {
  PreferenceGraph g;
  g.add_attribute("neon", "neon");
  g.add_attribute("moss", "moss");
  g.add_user("solo", FeatureMode::zero, {"neon"}, {"moss"});
  EXPECT_TRUE(neighbor_likes(g, "solo", 10).empty());
  EXPECT_EQ(neighbor_alignment("add neon accents", "solo", g), 0.0);
}

TEST(NeighborAlignment, NeighbourOnlyAttribute) {
  PreferenceGraph g;
  for (const char* a : {"neon", "chrome", "moss", "velvet", "marble"}) g.add_attribute(a, a);
  g.add_user("u", FeatureMode::zero, {"neon"}, {"moss"});
  g.add_user("v", FeatureMode::zero, {"chrome"}, {"moss"});   // shares the dislike
  g.add_user("w", FeatureMode::zero, {"marble"}, {"velvet"});  // shares nothing with u
  const std::string text = "apply a chrome color scheme to the cup";
  EXPECT_EQ(alignment_score(text, g.attributes_of("u", Polarity::like), g.attributes_of("u", Polarity::dislike)), 0.0);
  EXPECT_DOUBLE_EQ(neighbor_alignment(text, "u", g), 1.0);
  EXPECT_EQ(neighbor_alignment("apply a marble color scheme to the cup", "u", g), 0.0);
  EXPECT_THROW(neighbor_alignment(text, "nobody", g), LookupError);
}

TEST(Conditions, NamesRoundTrip) {
  for (auto c : all_conditions()) EXPECT_EQ(parse_condition(condition_name(c)), c);
  EXPECT_THROW(parse_condition("likes"), Error);
}

TEST(StatOf, SampleStd) {
  const auto s = stat_of({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(stat_of({7.0}).std, 0.0);
}

TEST(WellFormed, ChecksCueAndObject) {
  EXPECT_TRUE(well_formed("overlay a rainbow pattern on the bowl", "a white ceramic bowl", "pattern-overlay"));
  EXPECT_FALSE(well_formed("overlay a rainbow pattern on the cup", "a white ceramic bowl", "pattern-overlay"));
  EXPECT_FALSE(well_formed("overlay a rainbow pattern on the bowl", "a white ceramic bowl", "color-change"));
  EXPECT_FALSE(well_formed("rainbow bowl", "a white ceramic bowl", "pattern-overlay"));
}

class BenchmarkFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new RunConfig(tiny_run());
    prep_ = new Prepared(prepare(*cfg_));
  }
  static void TearDownTestSuite() {
    delete prep_;
    delete cfg_;
  }
  static RunConfig* cfg_;
  static Prepared* prep_;
};

RunConfig* BenchmarkFixture::cfg_ = nullptr;
Prepared* BenchmarkFixture::prep_ = nullptr;

TEST_F(BenchmarkFixture, RowsFollowMethodOrder) {
  const auto& p = *prep_;
  auto user = train_variant(p, *cfg_, {"B", true, 0.0, 0});
  std::vector<Method> ms{{"Z", p.sft, std::nullopt}, user, {"A", p.sft, std::nullopt}};
  const auto rep = benchmark(ms, p.data, p.graph, p.vocab, cfg_->eval);
  ASSERT_EQ(rep.rows.size(), 9u);
  const char* order[] = {"Z", "B", "A"};
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    EXPECT_EQ(rep.rows[i].method, order[i / 3]);
    EXPECT_EQ(rep.rows[i].condition, condition_name(all_conditions()[i % 3]));
    EXPECT_EQ(rep.rows[i].users, 2u);
  }
  // Each test user decodes captions x edit types per condition.
  const std::size_t per_user = cfg_->data.n_captions * edit_types().size();
  EXPECT_EQ(rep.samples.size(), 9u * 2u * per_user);
  EXPECT_EQ(rep.per_user.size(), 18u);
}

TEST_F(BenchmarkFixture, DuplicateMethodGivesIdenticalRows) {
  const auto& p = *prep_;
  auto m = train_variant(p, *cfg_, {"C-DPO", true, 0.15, 3});
  auto twin = m;
  twin.name = "copy";
  const auto rep = benchmark({m, twin}, p.data, p.graph, p.vocab, cfg_->eval);
  for (auto c : all_conditions()) {
    const auto& a = rep.row("C-DPO", c);
    const auto& b = rep.row("copy", c);
    EXPECT_EQ(a.alignment.mean, b.alignment.mean);
    EXPECT_EQ(a.alignment.std, b.alignment.std);
    EXPECT_EQ(a.neighbor_alignment.mean, b.neighbor_alignment.mean);
    EXPECT_EQ(a.well_formed.mean, b.well_formed.mean);
  }
}

TEST_F(BenchmarkFixture, UnconditionedMethodIgnoresCondition) {
  const auto& p = *prep_;
  const auto rep = benchmark({{"SFT", p.sft, std::nullopt}}, p.data, p.graph, p.vocab, cfg_->eval);
  for (auto c : all_conditions()) EXPECT_EQ(rep.row("SFT", c).alignment.mean, rep.rows[0].alignment.mean);
}

TEST_F(BenchmarkFixture, ScoresAgreeWithSamples) {
  const auto& p = *prep_;
  const auto rep = benchmark({{"SFT", p.sft, std::nullopt}}, p.data, p.graph, p.vocab, cfg_->eval);
  for (const auto& u : rep.per_user) {
    const auto& persona = p.data.persona(u.user);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : rep.samples) {
      if (s.user != u.user || s.condition != u.condition) continue;
      sum += static_cast<double>(count_by_hand(s.output, persona.likes)) / persona.likes.size() -
             static_cast<double>(count_by_hand(s.output, persona.dislikes)) / persona.dislikes.size();
      ++n;
    }
    ASSERT_EQ(n, u.decodes);
    EXPECT_NEAR(u.alignment, sum / n, 1e-12);
  }
}

TEST_F(BenchmarkFixture, Deterministic) {
  const auto& p = *prep_;
  auto run = [&] {
    auto m = train_variant(p, *cfg_, {"C-DPO", true, 0.15, 3});
    return benchmark({m}, p.data, p.graph, p.vocab, cfg_->eval);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.json().dump(), b.json().dump());
  EXPECT_EQ(a.csv(), b.csv());
  EXPECT_EQ(a.table(), b.table());
}

TEST_F(BenchmarkFixture, RejectsBadInput) {
  const auto& p = *prep_;
  EXPECT_THROW(benchmark({}, p.data, p.graph, p.vocab), Error);
  BenchmarkConfig none;
  none.conditions.clear();
  EXPECT_THROW(benchmark({{"SFT", p.sft, std::nullopt}}, p.data, p.graph, p.vocab, none), Error);
  GnnConfig gc;
  gc.in_dim = p.graph.feature_dim();
  gc.out_dim = 5;
  EXPECT_THROW(benchmark({{"bad", p.sft, GnnModel(gc, {})}}, p.data, p.graph, p.vocab), ShapeError);
}

TEST_F(BenchmarkFixture, SinglePointGridEqualsOneRun) {
  const auto& p = *prep_;
  const auto grid = ablation_grid(p, *cfg_, AblationParam::lambda, {0.15});
  auto m = train_variant(p, *cfg_, {"lambda=0.15", true, 0.15, cfg_->dpo.k});
  const auto one = benchmark({m}, p.data, p.graph, p.vocab, cfg_->eval);
  EXPECT_EQ(grid.report.json().dump(), one.json().dump());
  EXPECT_EQ(grid.row(0.15).method, "lambda=0.15");
}

TEST_F(BenchmarkFixture, GridLabelsAndValidation) {
  const auto& p = *prep_;
  EXPECT_EQ(grid_label(AblationParam::k, 12), "K=12");
  EXPECT_EQ(grid_label(AblationParam::lambda, 0.5), "lambda=0.5");
  EXPECT_EQ(parse_param("K"), AblationParam::k);
  EXPECT_THROW(parse_param("beta"), Error);
  EXPECT_THROW(ablation_grid(p, *cfg_, AblationParam::k, {}), Error);
  EXPECT_THROW(ablation_grid(p, *cfg_, AblationParam::k, {2.5}), Error);
  const auto r = ablation_grid(p, *cfg_, AblationParam::k, {2, 5});
  EXPECT_EQ(r.report.rows.size(), 6u);
  EXPECT_EQ(r.report.rows[0].method, "K=2");
  EXPECT_EQ(r.report.rows[3].method, "K=5");
  EXPECT_EQ(r.json()["param"], "K");
}
