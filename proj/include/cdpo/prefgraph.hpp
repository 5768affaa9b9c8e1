#pragma once

// Bipartite user/attribute preference graph with polarity-labelled edges,
// shared-neighbour similarity weights and K-nearest neighbourhoods.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/error.hpp"
#include "cdpo/rng.hpp"

namespace cdpo {

inline constexpr std::size_t kAttributeDim = 64;

enum class Polarity : std::uint8_t { like, dislike };

inline std::string to_string(Polarity p) { return p == Polarity::like ? "like" : "dislike"; }

inline Polarity parse_polarity(std::string_view s) {
  if (s == "like") return Polarity::like;
  if (s == "dislike") return Polarity::dislike;
  throw FormatError("unknown polarity '" + std::string(s) + "' (expected \"like\" or \"dislike\")");
}

enum class FeatureMode : std::uint8_t { learned, zero };

inline std::string to_string(FeatureMode m) { return m == FeatureMode::learned ? "learned" : "zero"; }

inline FeatureMode parse_feature_mode(std::string_view s) {
  if (s == "learned") return FeatureMode::learned;
  if (s == "zero") return FeatureMode::zero;
  throw FormatError("unknown feature_mode '" + std::string(s) + "' (expected \"learned\" or \"zero\")");
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Signed hashed bag of character trigrams over the lower-cased, '#'-padded
// text, L2-normalised. Equal texts map to equal vectors; texts sharing
// substrings land close together.
inline std::vector<double> embed_attribute(std::string_view text, std::size_t dim = kAttributeDim) {
  if (text.empty()) throw Error("embed_attribute: empty text");
  if (dim == 0) throw Error("embed_attribute: zero dimension");
  std::string padded = "#";
  for (char c : text) padded += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  padded += "#";
  std::vector<double> v(dim, 0.0), counts(dim, 0.0);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    const std::uint64_t h = detail::fnv1a(std::string_view(padded).substr(i, 3));
    const std::size_t slot = static_cast<std::size_t>(h % dim);
    v[slot] += ((h >> 40) & 1u) ? 1.0 : -1.0;
    counts[slot] += 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm == 0.0) {
    // Every slot cancelled; fall back to the unsigned bag.
    v = counts;
    for (double x : v) norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

struct AttributeNode {
  std::string id;
  std::string text;
  std::vector<double> feature;
};

struct UserNode {
  std::string id;
  FeatureMode feature_mode = FeatureMode::learned;
};

struct PrefEdge {
  std::string user_id;
  std::string attribute_id;
  Polarity polarity = Polarity::like;
};

struct EdgeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct Neighbor {
  std::string id;
  std::size_t index = 0;
  double weight = 0.0;
};

class PreferenceGraph {
 public:
  explicit PreferenceGraph(std::size_t feature_dim = kAttributeDim) : feature_dim_(feature_dim) {}

  std::size_t feature_dim() const { return feature_dim_; }

  void add_attribute(const std::string& id, const std::string& text) {
    if (id.empty()) throw Error("add_attribute: empty id");
    if (attr_index_.contains(id)) throw Error("add_attribute: duplicate attribute id '" + id + "'");
    attr_index_.emplace(id, attributes_.size());
    attributes_.push_back({id, text, embed_attribute(text, feature_dim_)});
    attribute_users_.emplace_back();
  }

  // Registers a user and its polarity edges. Fails before mutating anything
  // when the attribute sets overlap or reference unknown attributes.
  void add_user(const std::string& id, FeatureMode mode, const std::vector<std::string>& likes,
                const std::vector<std::string>& dislikes) {
    if (id.empty()) throw Error("add_user: empty id");
    if (user_index_.contains(id)) throw Error("add_user: duplicate user id '" + id + "'");
    std::set<std::string> seen;
    for (const auto* list : {&likes, &dislikes}) {
      for (const auto& a : *list) {
        attribute_index(a);
        if (!seen.insert(a).second) {
          throw Error("add_user: attribute '" + a + "' listed more than once for user '" + id +
                      "' (likes and dislikes must be disjoint)");
        }
      }
    }
    user_index_.emplace(id, users_.size());
    users_.push_back({id, mode});
    user_edges_.emplace_back();
    for (auto& row : shared_) row.push_back(0);
    shared_.emplace_back(users_.size(), 0);
    for (const auto& a : likes) add_edge(id, a, Polarity::like);
    for (const auto& a : dislikes) add_edge(id, a, Polarity::dislike);
  }

  // New zero-feature user with a generated id.
  std::string add_user(const std::vector<std::string>& likes, const std::vector<std::string>& dislikes) {
    std::string id;
    do {
      id = "new-" + std::to_string(next_new_id_++);
    } while (user_index_.contains(id));
    add_user(id, FeatureMode::zero, likes, dislikes);
    return id;
  }

  void add_edge(const std::string& user_id, const std::string& attribute_id, Polarity polarity) {
    const std::size_t u = user_index(user_id);
    const std::size_t a = attribute_index(attribute_id);
    for (const auto& [attr, pol] : user_edges_[u]) {
      if (attr == a) {
        throw Error("duplicate edge between user '" + user_id + "' and attribute '" + attribute_id + "'");
      }
    }
    for (const auto& [v, pol] : attribute_users_[a]) {
      if (pol == polarity) {
        ++shared_[u][v];
        ++shared_[v][u];
      }
    }
    user_edges_[u].push_back({a, polarity});
    attribute_users_[a].push_back({u, polarity});
    edges_.push_back({user_id, attribute_id, polarity});
    max_shared_.reset();
  }

  const std::vector<UserNode>& users() const { return users_; }
  const std::vector<AttributeNode>& attributes() const { return attributes_; }
  const std::vector<PrefEdge>& edges() const { return edges_; }

  bool has_user(const std::string& id) const { return user_index_.contains(id); }
  bool has_attribute(const std::string& id) const { return attr_index_.contains(id); }

  std::size_t user_index(const std::string& id) const {
    auto it = user_index_.find(id);
    if (it == user_index_.end()) throw LookupError("unknown user id '" + id + "'");
    return it->second;
  }

  std::size_t attribute_index(const std::string& id) const {
    auto it = attr_index_.find(id);
    if (it == attr_index_.end()) throw LookupError("unknown attribute id '" + id + "'");
    return it->second;
  }

  // Attribute ids connected to the user with the given polarity, in
  // insertion order.
  std::vector<std::string> attributes_of(const std::string& user_id, Polarity polarity) const {
    std::vector<std::string> out;
    for (const auto& [a, pol] : user_edges_[user_index(user_id)]) {
      if (pol == polarity) out.push_back(attributes_[a].id);
    }
    return out;
  }

  // Number of attributes both users are connected to with the same polarity.
  std::uint32_t shared_count(const std::string& u, const std::string& v) const {
    return shared_[user_index(u)][user_index(v)];
  }

  // Largest shared count over distinct user pairs.
  std::uint32_t max_shared() const {
    if (!max_shared_) {
      std::uint32_t m = 0;
      for (std::size_t i = 0; i < shared_.size(); ++i)
        for (std::size_t j = i + 1; j < shared_.size(); ++j) m = std::max(m, shared_[i][j]);
      max_shared_ = m;
    }
    return *max_shared_;
  }

  double similarity(const std::string& u, const std::string& v) const {
    const std::size_t i = user_index(u);
    const std::size_t j = user_index(v);
    if (i == j) throw Error("similarity: u and v must differ (got '" + u + "' twice)");
    return weight(i, j);
  }

  // Top-K users by weight, descending, ties by ascending id. Zero-weight users
  // are never returned.
  std::vector<Neighbor> k_nearest(const std::string& user_id, std::size_t k) const {
    const std::size_t u = user_index(user_id);
    std::vector<Neighbor> all;
    if (k == 0) return all;
    for (std::size_t v = 0; v < users_.size(); ++v) {
      if (v == u) continue;
      const double w = weight(u, v);
      if (w > 0.0) all.push_back({users_[v].id, v, w});
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.id < b.id;
    });
    if (all.size() > k) all.resize(k);
    return all;
  }

  // Deterministic 60/20/20 partition of edge indices.
  EdgeSplit split_edges(std::uint64_t seed) const {
    const std::size_t n = edges_.size();
    if (n < 5) throw Error("split_edges: need at least 5 edges, graph has " + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const std::size_t n_train = n * 6 / 10;
    const std::size_t n_val = n * 2 / 10;
    EdgeSplit s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
  }

  // Same nodes, only the listed edges.
  PreferenceGraph with_edges(const std::vector<std::size_t>& edge_indices) const {
    PreferenceGraph g(feature_dim_);
    g.attributes_ = attributes_;
    g.attr_index_ = attr_index_;
    g.attribute_users_.assign(attributes_.size(), {});
    for (const auto& u : users_) g.add_user(u.id, u.feature_mode, {}, {});
    for (std::size_t e : edge_indices) {
      if (e >= edges_.size()) throw LookupError("with_edges: edge index out of range");
      g.add_edge(edges_[e].user_id, edges_[e].attribute_id, edges_[e].polarity);
    }
    g.next_new_id_ = next_new_id_;
    return g;
  }

  // Undirected adjacency over node rows: users first (0..U-1), then
  // attributes (U..U+A-1). Polarity is not part of the adjacency.
  std::vector<std::vector<std::size_t>> adjacency() const {
    const std::size_t nu = users_.size();
    std::vector<std::vector<std::size_t>> adj(nu + attributes_.size());
    for (std::size_t u = 0; u < nu; ++u)
      for (const auto& [a, pol] : user_edges_[u]) adj[u].push_back(nu + a);
    for (std::size_t a = 0; a < attributes_.size(); ++a)
      for (const auto& [u, pol] : attribute_users_[a]) adj[nu + a].push_back(u);
    return adj;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["users"] = nlohmann::ordered_json::array();
    for (const auto& u : users_) j["users"].push_back({{"id", u.id}, {"feature_mode", to_string(u.feature_mode)}});
    j["attributes"] = nlohmann::ordered_json::array();
    for (const auto& a : attributes_) j["attributes"].push_back({{"id", a.id}, {"text", a.text}});
    j["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : edges_) {
      j["edges"].push_back(
          {{"user", e.user_id}, {"attribute", e.attribute_id}, {"polarity", to_string(e.polarity)}});
    }
    return j;
  }

  std::string dump() const { return to_json().dump(2) + "\n"; }

  template <class Json>
  static PreferenceGraph from_json(const Json& j, std::size_t feature_dim = kAttributeDim) {
    try {
      for (const char* key : {"users", "attributes", "edges"}) {
        if (!j.contains(key) || !j.at(key).is_array()) {
          throw FormatError(std::string("graph file: missing array '") + key + "'");
        }
      }
      PreferenceGraph g(feature_dim);
      for (const auto& a : j.at("attributes")) {
        g.add_attribute(a.at("id").template get<std::string>(), a.at("text").template get<std::string>());
      }
      for (const auto& u : j.at("users")) {
        const std::string mode = u.contains("feature_mode") ? u.at("feature_mode").template get<std::string>() : "learned";
        g.add_user(u.at("id").template get<std::string>(), parse_feature_mode(mode), {}, {});
      }
      for (const auto& e : j.at("edges")) {
        g.add_edge(e.at("user").template get<std::string>(), e.at("attribute").template get<std::string>(),
                   parse_polarity(e.at("polarity").template get<std::string>()));
      }
      return g;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("graph file: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write graph file '" + path + "'");
    out << dump();
  }

  static PreferenceGraph load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open graph file '" + path + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("graph file '" + path + "': " + e.what());
    }
    return from_json(j);
  }

 private:
  double weight(std::size_t i, std::size_t j) const {
    const std::uint32_t m = max_shared();
    if (m == 0) return 0.0;
    return static_cast<double>(shared_[i][j]) / static_cast<double>(m);
  }

  std::size_t feature_dim_;
  std::vector<UserNode> users_;
  std::vector<AttributeNode> attributes_;
  std::vector<PrefEdge> edges_;
  std::map<std::string, std::size_t> user_index_;
  std::map<std::string, std::size_t> attr_index_;
  std::vector<std::vector<std::pair<std::size_t, Polarity>>> user_edges_;
  std::vector<std::vector<std::pair<std::size_t, Polarity>>> attribute_users_;
  std::vector<std::vector<std::uint32_t>> shared_;
  mutable std::optional<std::uint32_t> max_shared_;
  std::size_t next_new_id_ = 0;
};

}  // namespace cdpo
