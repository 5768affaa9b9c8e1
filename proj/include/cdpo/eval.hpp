#pragma once

// Lexical preference alignment of generated instructions, and the method
// comparison over held-out users.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/datagen.hpp"
#include "cdpo/gnn.hpp"
#include "cdpo/policy.hpp"
#include "cdpo/prefgraph.hpp"

namespace cdpo {

namespace detail {

inline std::set<std::string> lower_words(const std::string& text) {
  std::set<std::string> out;
  std::string w;
  auto flush = [&] {
    if (!w.empty()) out.insert(w);
    w.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '-' || c == '\'') {
      w += static_cast<char>(std::tolower(c));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

// A phrase is mentioned when every one of its words occurs in the text.
inline bool mentions(const std::set<std::string>& words, const std::string& phrase) {
  const auto pw = lower_words(phrase);
  if (pw.empty()) return false;
  return std::all_of(pw.begin(), pw.end(), [&](const std::string& w) { return words.contains(w); });
}

inline std::size_t count_mentions(const std::set<std::string>& words, const std::vector<std::string>& phrases) {
  std::set<std::string> seen;
  std::size_t n = 0;
  for (const auto& p : phrases)
    if (seen.insert(p).second && mentions(words, p)) ++n;
  return n;
}

inline std::size_t distinct(const std::vector<std::string>& v) { return std::set<std::string>(v.begin(), v.end()).size(); }

}  // namespace detail

struct Alignment {
  std::size_t like_hits = 0, dislike_hits = 0;
  double like_rate = 0.0, dislike_rate = 0.0;
  double score = 0.0;  // like_rate - dislike_rate
};

inline Alignment alignment(const std::string& text, const std::vector<std::string>& likes,
                           const std::vector<std::string>& dislikes) {
  if (likes.empty() && dislikes.empty()) throw Error("alignment_score: likes and dislikes are both empty");
  const auto words = detail::lower_words(text);
  Alignment a;
  a.like_hits = detail::count_mentions(words, likes);
  a.dislike_hits = detail::count_mentions(words, dislikes);
  if (!likes.empty()) a.like_rate = static_cast<double>(a.like_hits) / static_cast<double>(detail::distinct(likes));
  if (!dislikes.empty())
    a.dislike_rate = static_cast<double>(a.dislike_hits) / static_cast<double>(detail::distinct(dislikes));
  a.score = a.like_rate - a.dislike_rate;
  return a;
}

inline double alignment_score(const std::string& text, const std::vector<std::string>& likes,
                              const std::vector<std::string>& dislikes) {
  return alignment(text, likes, dislikes).score;
}

// Liked attribute ids of the user's top_n most similar users.
inline std::vector<std::string> neighbor_likes(const PreferenceGraph& g, const std::string& user, std::size_t top_n) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& n : g.k_nearest(user, top_n)) {
    for (const auto& a : g.attributes_of(n.id, Polarity::like))
      if (seen.insert(a).second) out.push_back(a);
  }
  return out;
}

inline double neighbor_alignment(const std::string& text, const std::string& user, const PreferenceGraph& g,
                                 std::size_t top_n = 10) {
  const auto likes = neighbor_likes(g, user, top_n);
  if (likes.empty()) return 0.0;
  return alignment(text, likes, {}).score;
}

// ---- benchmark ----

enum class Condition { like_dislike, likes, dislikes };

inline const std::vector<Condition>& all_conditions() {
  static const std::vector<Condition> c{Condition::like_dislike, Condition::likes, Condition::dislikes};
  return c;
}

inline std::string condition_name(Condition c) {
  switch (c) {
    case Condition::like_dislike: return "Like+Dislike";
    case Condition::likes: return "Likes";
    case Condition::dislikes: return "Dislikes";
  }
  return "?";
}

inline Condition parse_condition(const std::string& s) {
  for (auto c : all_conditions())
    if (condition_name(c) == s) return c;
  throw Error("unknown condition '" + s + "' (expected Like+Dislike, Likes or Dislikes)");
}

// A trained policy; with a GNN the policy is conditioned on soft tokens.
struct Method {
  std::string name;
  PolicyModel policy;
  std::optional<GnnModel> gnn;
};

struct BenchmarkConfig {
  std::vector<Condition> conditions = all_conditions();
  std::size_t top_n = 10;
};

struct UserScore {
  std::string method, condition, user;
  std::size_t decodes = 0;
  double like_rate = 0.0, dislike_rate = 0.0, alignment = 0.0, neighbor_alignment = 0.0, well_formed = 0.0;
};

struct Stat {
  double mean = 0.0, std = 0.0;
};

inline Stat stat_of(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct MethodScore {
  std::string method, condition;
  std::size_t users = 0;
  Stat alignment, like_rate, dislike_rate, neighbor_alignment, well_formed;
};

struct Sample {
  std::string method, condition, user, caption, cue, output;
};

struct BenchmarkReport {
  std::vector<MethodScore> rows;  // method order, then condition order
  std::vector<UserScore> per_user;
  std::vector<Sample> samples;

  const MethodScore& row(const std::string& method, Condition c) const {
    for (const auto& r : rows)
      if (r.method == method && r.condition == condition_name(c)) return r;
    throw LookupError("benchmark: no row for " + method + " / " + condition_name(c));
  }

  nlohmann::ordered_json json() const {
    auto st = [](const Stat& s) { return nlohmann::ordered_json{{"mean", s.mean}, {"std", s.std}}; };
    nlohmann::ordered_json j;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      j["rows"].push_back({{"method", r.method},
                           {"condition", r.condition},
                           {"users", r.users},
                           {"alignment", st(r.alignment)},
                           {"like_rate", st(r.like_rate)},
                           {"dislike_rate", st(r.dislike_rate)},
                           {"neighbor_alignment", st(r.neighbor_alignment)},
                           {"well_formed", st(r.well_formed)}});
    }
    return j;
  }

  std::string table() const {
    std::ostringstream o;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-14s %-13s %-17s %-8s %-8s %-9s %-6s\n", "method", "condition", "alignment",
                  "like", "dislike", "neighbor", "parse");
    o << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-14s %-13s %+.3f +- %.3f   %.3f    %.3f    %+.3f    %.2f\n", r.method.c_str(),
                    r.condition.c_str(), r.alignment.mean, r.alignment.std, r.like_rate.mean, r.dislike_rate.mean,
                    r.neighbor_alignment.mean, r.well_formed.mean);
      o << buf;
    }
    return o.str();
  }

  std::string csv() const {
    std::ostringstream o;
    o << "method,condition,user,decodes,like_rate,dislike_rate,alignment,neighbor_alignment,well_formed\n";
    char buf[128];
    for (const auto& u : per_user) {
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", u.decodes, u.like_rate, u.dislike_rate,
                    u.alignment, u.neighbor_alignment, u.well_formed);
      o << u.method << ',' << u.condition << ',' << u.user << ',' << buf << '\n';
    }
    return o.str();
  }
};

// True when the text is a template instruction for `cue` acting on the
// caption's object.
inline bool well_formed(const std::string& text, const std::string& caption, const std::string& cue) {
  const auto p = parse_instruction(text);
  return p && p->edit_type == cue && caption.ends_with(" " + p->object);
}

// Distinct captions of a user's tuples, in dataset order.
inline std::vector<std::string> captions_of(const Dataset& d, const std::string& user) {
  std::vector<std::string> out;
  for (const auto& t : d.tuples)
    if (t.user == user && std::find(out.begin(), out.end(), t.caption) == out.end()) out.push_back(t.caption);
  return out;
}

// Greedy decodes for every test user x caption x edit type. Each test user
// is inserted into its own copy of `graph` with the condition's edges, then
// embedded without touching the model. Scores always use the full profile.
inline BenchmarkReport benchmark(const std::vector<Method>& methods, const Dataset& data, const PreferenceGraph& graph,
                                 const Vocabulary& vocab, const BenchmarkConfig& cfg = {}) {
  if (methods.empty()) throw Error("benchmark: no methods");
  if (cfg.conditions.empty()) throw Error("benchmark: no conditions");
  const auto users = data.split("test");
  if (users.empty()) throw Error("benchmark: dataset has no test users");

  // Inputs shared by every method.
  struct Prompt {
    std::string caption, cue;
    std::vector<std::size_t> caption_ids, cue_ids;
  };
  std::map<std::string, std::vector<Prompt>> prompts;
  std::map<std::string, std::vector<std::string>> nbr_likes;
  for (const auto* p : users) {
    auto& ps = prompts[p->id];
    for (const auto& c : captions_of(data, p->id))
      for (const auto& e : edit_types()) ps.push_back({c, e.name, vocab.encode(c), vocab.encode(e.name)});
    PreferenceGraph g = graph;
    g.add_user(p->id, FeatureMode::zero, p->likes, p->dislikes);
    nbr_likes[p->id] = neighbor_likes(g, p->id, cfg.top_n);
  }

  BenchmarkReport rep;
  for (const auto& m : methods) {
    if (m.gnn && m.gnn->out_dim() != m.policy.config().user_dim) {
      throw ShapeError("benchmark: method '" + m.name + "' has GNN width " + std::to_string(m.gnn->out_dim()) +
                       " but policy user_dim " + std::to_string(m.policy.config().user_dim));
    }
    std::map<std::string, std::vector<std::string>> unconditioned;  // reused across conditions
    for (auto cond : cfg.conditions) {
      MethodScore row{m.name, condition_name(cond), users.size(), {}, {}, {}, {}, {}};
      std::vector<double> al, lr, dr, na, wf;
      for (const auto* p : users) {
        UserVector h;
        if (m.gnn) {
          PreferenceGraph g = graph;
          const auto likes = cond == Condition::dislikes ? std::vector<std::string>{} : p->likes;
          const auto dislikes = cond == Condition::likes ? std::vector<std::string>{} : p->dislikes;
          h = embed_new_user(g, *m.gnn, likes, dislikes, p->id).h;
        }
        std::vector<std::string> outputs;
        if (!m.gnn && unconditioned.contains(p->id)) {
          outputs = unconditioned[p->id];
        } else {
          for (const auto& q : prompts[p->id]) outputs.push_back(vocab.decode(decode(m.policy, h, q.caption_ids, q.cue_ids)));
          if (!m.gnn) unconditioned[p->id] = outputs;
        }
        UserScore u{m.name, row.condition, p->id, outputs.size(), 0, 0, 0, 0, 0};
        for (std::size_t i = 0; i < outputs.size(); ++i) {
          const auto& q = prompts[p->id][i];
          const auto a = alignment(outputs[i], p->likes, p->dislikes);
          u.like_rate += a.like_rate;
          u.dislike_rate += a.dislike_rate;
          u.alignment += a.score;
          u.neighbor_alignment += nbr_likes[p->id].empty() ? 0.0 : alignment(outputs[i], nbr_likes[p->id], {}).score;
          u.well_formed += well_formed(outputs[i], q.caption, q.cue) ? 1.0 : 0.0;
          rep.samples.push_back({m.name, row.condition, p->id, q.caption, q.cue, outputs[i]});
        }
        const double n = static_cast<double>(outputs.size());
        for (double* x : {&u.like_rate, &u.dislike_rate, &u.alignment, &u.neighbor_alignment, &u.well_formed}) *x /= n;
        al.push_back(u.alignment);
        lr.push_back(u.like_rate);
        dr.push_back(u.dislike_rate);
        na.push_back(u.neighbor_alignment);
        wf.push_back(u.well_formed);
        rep.per_user.push_back(u);
      }
      row.alignment = stat_of(al);
      row.like_rate = stat_of(lr);
      row.dislike_rate = stat_of(dr);
      row.neighbor_alignment = stat_of(na);
      row.well_formed = stat_of(wf);
      rep.rows.push_back(row);
    }
  }
  return rep;
}

}  // namespace cdpo
