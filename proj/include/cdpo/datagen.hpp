#pragma once

// Synthetic persona benchmark: an attribute pool grouped into style
// clusters, archetypes that bias which clusters a persona likes and
// dislikes, captions over the COCO object list, and chosen/rejected edit
// instructions built from six templates.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/dpo.hpp"
#include "cdpo/error.hpp"
#include "cdpo/policy.hpp"
#include "cdpo/prefgraph.hpp"
#include "cdpo/rng.hpp"

namespace cdpo {

inline constexpr int kPoolVersion = 1;

struct EditType {
  std::string name;  // also the cue token
  std::string before, middle, after;  // before + attribute + middle + object + after
};

inline const std::array<EditType, 6>& edit_types() {
  static const std::array<EditType, 6> types = {{
      {"color-change", "apply a", "color scheme to the", ""},
      {"pattern-overlay", "overlay a", "pattern on the", ""},
      {"object-addition", "add", "accents to the", ""},
      {"style-transfer", "give a", "style to the", ""},
      {"background-change", "place a", "background behind the", ""},
      {"material-change", "use a", "material for the", ""},
  }};
  return types;
}

inline const EditType& edit_type(std::string_view name) {
  for (const auto& t : edit_types())
    if (t.name == name) return t;
  throw LookupError("unknown edit type '" + std::string(name) + "'");
}

inline std::string instruction(const EditType& t, std::string_view attribute, std::string_view object) {
  std::string s = t.before + " " + std::string(attribute) + " " + t.middle + " " + std::string(object);
  if (!t.after.empty()) s += " " + t.after;
  return s;
}

struct Cluster {
  std::string name;
  std::vector<std::string> attributes;
};

struct Archetype {
  std::string name;
  std::size_t liked;                  // cluster index
  std::vector<std::size_t> disliked;  // cluster indices
};

struct Pool {
  std::vector<Cluster> clusters;
  std::vector<Archetype> archetypes;
  std::vector<std::string> objects;
  std::vector<std::string> descriptors;

  std::vector<std::string> attributes() const {
    std::vector<std::string> out;
    for (const auto& c : clusters) out.insert(out.end(), c.attributes.begin(), c.attributes.end());
    return out;
  }

  std::size_t cluster_of(const std::string& attribute) const {
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      const auto& a = clusters[i].attributes;
      if (std::find(a.begin(), a.end(), attribute) != a.end()) return i;
    }
    throw LookupError("attribute '" + attribute + "' is not in the pool");
  }

  // Every word the templates, captions and cues can produce.
  std::vector<std::string> words() const {
    std::set<std::string> w;
    auto add = [&](std::string_view text) {
      for (auto& x : split_words(text)) w.insert(x);
    };
    for (const auto& t : edit_types()) {
      add(t.before);
      add(t.middle);
      add(t.after);
      w.insert(t.name);
    }
    for (const auto& a : attributes()) add(a);
    for (const auto& o : objects) add(o);
    for (const auto& d : descriptors) add(d);
    w.insert("a");
    return {w.begin(), w.end()};
  }
};

inline const Pool& build_pool() {
  static const Pool pool = [] {
    Pool p;
    p.clusters = {
        {"whimsical", {"rainbow", "pastel", "cartoon stars", "glitter", "bubblegum pink", "candy stripes"}},
        {"futuristic", {"neon", "holographic", "chrome", "circuit lines", "cyberpunk", "laser grid"}},
        {"rustic", {"rustic wood", "earthy brown", "burlap", "farmhouse", "weathered oak", "terracotta"}},
        {"minimal", {"monochrome", "matte white", "clean lines", "muted tones", "soft gray", "scandinavian"}},
        {"gothic", {"gothic", "black lace", "dark crimson", "velvet", "baroque", "midnight purple"}},
        {"nature", {"floral", "botanical", "leafy green", "sunflower", "moss", "watercolor"}},
        {"retro", {"retro", "polka dots", "vintage", "art deco", "mustard yellow", "checkerboard"}},
        {"coastal", {"nautical", "ocean blue", "seashell", "sandy beige", "turquoise", "coral reef"}},
        {"luxury", {"gold leaf", "marble", "emerald", "ivory silk", "royal blue", "crystal"}},
        {"industrial", {"concrete", "rusted steel", "graffiti", "brick red", "copper pipes", "camouflage"}},
    };
    p.archetypes = {
        {"imaginative child", 0, {4, 9}},   {"futuristic techie", 1, {2, 6}},
        {"rustic homesteader", 2, {1, 3}},  {"minimalist designer", 3, {0, 6}},
        {"goth romantic", 4, {0, 7}},       {"nature lover", 5, {9, 1}},
        {"retro collector", 6, {3, 1}},     {"beach dreamer", 7, {4, 9}},
        {"luxury connoisseur", 8, {9, 2}},  {"urban artist", 9, {8, 5}},
    };
    p.objects = {"person",        "bicycle",      "car",          "motorcycle",   "airplane",     "bus",
                 "train",         "truck",        "boat",         "traffic light", "fire hydrant", "stop sign",
                 "parking meter", "bench",        "bird",         "cat",          "dog",          "horse",
                 "sheep",         "cow",          "elephant",     "bear",         "zebra",        "giraffe",
                 "backpack",      "umbrella",     "handbag",      "tie",          "suitcase",     "frisbee",
                 "skis",          "snowboard",    "sports ball",  "kite",         "baseball bat", "baseball glove",
                 "skateboard",    "surfboard",    "tennis racket", "bottle",      "wine glass",   "cup",
                 "fork",          "knife",        "spoon",        "bowl",         "banana",       "apple",
                 "sandwich",      "orange",       "broccoli",     "carrot",       "hot dog",      "pizza",
                 "donut",         "cake",         "chair",        "couch",        "potted plant", "bed",
                 "dining table",  "toilet",       "tv",           "laptop",       "mouse",        "remote",
                 "keyboard",      "cell phone",   "microwave",    "oven",         "toaster",      "sink",
                 "refrigerator",  "book",         "clock",        "vase",         "scissors",     "teddy bear",
                 "hair drier",    "toothbrush"};
    p.descriptors = {"white ceramic", "small", "large", "old", "shiny", "plain", "tall", "round", "worn", "bright"};
    return p;
  }();
  return pool;
}

struct Persona {
  std::string id;
  std::string archetype;
  std::string split;  // "train" or "test"
  std::vector<std::string> likes;
  std::vector<std::string> dislikes;

  friend bool operator==(const Persona&, const Persona&) = default;
};

struct PersonaConfig {
  std::size_t likes = 4;
  std::size_t dislikes = 4;
  double bias = 0.75;  // chance each pick comes from the archetype's clusters
};

inline Persona sample_persona(Rng& rng, const std::string& id, const PersonaConfig& cfg = {},
                              const Pool& pool = build_pool()) {
  if (cfg.likes < 1 || cfg.dislikes < 1) throw Error("sample_persona: need at least one like and one dislike");
  const auto all = pool.attributes();
  if (cfg.likes + cfg.dislikes > all.size()) throw Error("sample_persona: pool too small");
  const auto& arch = pool.archetypes[rng.index(pool.archetypes.size())];
  Persona p;
  p.id = id;
  p.archetype = arch.name;
  auto taken = [&](const std::string& a) {
    return std::find(p.likes.begin(), p.likes.end(), a) != p.likes.end() ||
           std::find(p.dislikes.begin(), p.dislikes.end(), a) != p.dislikes.end();
  };
  while (p.likes.size() < cfg.likes) {
    std::string a;
    if (rng.uniform() < cfg.bias) {
      const auto& c = pool.clusters[arch.liked].attributes;
      a = c[rng.index(c.size())];
    } else {
      a = all[rng.index(all.size())];
      const std::size_t k = pool.cluster_of(a);
      if (std::find(arch.disliked.begin(), arch.disliked.end(), k) != arch.disliked.end()) continue;
    }
    if (!taken(a)) p.likes.push_back(a);
  }
  while (p.dislikes.size() < cfg.dislikes) {
    std::string a;
    if (rng.uniform() < cfg.bias) {
      const auto& c = pool.clusters[arch.disliked[rng.index(arch.disliked.size())]].attributes;
      a = c[rng.index(c.size())];
    } else {
      a = all[rng.index(all.size())];
      if (pool.cluster_of(a) == arch.liked) continue;
    }
    if (!taken(a)) p.dislikes.push_back(a);
  }
  return p;
}

inline Persona sample_persona(std::uint64_t seed, const std::string& id, const PersonaConfig& cfg = {}) {
  Rng rng(seed);
  return sample_persona(rng, id, cfg);
}

inline std::string caption_for(std::string_view descriptor, std::string_view object) {
  return "a " + std::string(descriptor) + " " + std::string(object);
}

// For each caption and pair, one tuple per edit type: chosen uses a liked
// attribute, rejected a disliked one, both in the same template.
inline std::vector<PreferenceTuple> gen_tuples(Rng& rng, const Persona& p, std::size_t n_captions,
                                               std::size_t pairs_per_caption, const Pool& pool = build_pool()) {
  if (p.likes.empty() || p.dislikes.empty()) {
    throw Error("gen_tuples: persona '" + p.id + "' needs both likes and dislikes");
  }
  std::vector<PreferenceTuple> out;
  for (std::size_t c = 0; c < n_captions; ++c) {
    const auto& object = pool.objects[rng.index(pool.objects.size())];
    const auto caption = caption_for(pool.descriptors[rng.index(pool.descriptors.size())], object);
    for (std::size_t k = 0; k < pairs_per_caption; ++k) {
      for (const auto& t : edit_types()) {
        const auto& like = p.likes[rng.index(p.likes.size())];
        const auto& dislike = p.dislikes[rng.index(p.dislikes.size())];
        out.push_back({p.id, caption, t.name, instruction(t, like, object), instruction(t, dislike, object)});
      }
    }
  }
  return out;
}

struct ParsedInstruction {
  std::string edit_type, attribute, object;
};

// Inverse of `instruction` over the pool; nullopt when the text does not
// follow any template.
inline std::optional<ParsedInstruction> parse_instruction(std::string_view text, const Pool& pool = build_pool()) {
  const std::string s = [&] {
    std::string joined;
    for (const auto& w : split_words(text)) joined += (joined.empty() ? "" : " ") + w;
    return joined;
  }();
  for (const auto& t : edit_types()) {
    const std::string head = t.before + " ";
    if (!s.starts_with(head)) continue;
    for (const auto& a : pool.attributes()) {
      const std::string mid = head + a + " " + t.middle + " ";
      if (!s.starts_with(mid)) continue;
      std::string rest = s.substr(mid.size());
      if (!t.after.empty()) {
        const std::string tail = " " + t.after;
        if (!rest.ends_with(tail)) continue;
        rest.resize(rest.size() - tail.size());
      }
      if (std::find(pool.objects.begin(), pool.objects.end(), rest) != pool.objects.end()) {
        return ParsedInstruction{t.name, a, rest};
      }
    }
  }
  return std::nullopt;
}

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t train_users = 60;
  std::size_t test_users = 8;
  std::size_t n_captions = 2;
  std::size_t pairs_per_caption = 1;
  PersonaConfig persona;

  std::size_t users() const { return train_users + test_users; }
};

struct Dataset {
  DataConfig config;
  std::vector<Persona> personas;
  std::vector<PreferenceTuple> tuples;  // grouped by user, in persona order

  std::vector<const Persona*> split(std::string_view which) const {
    std::vector<const Persona*> out;
    for (const auto& p : personas)
      if (p.split == which) out.push_back(&p);
    return out;
  }

  const Persona& persona(const std::string& id) const {
    for (const auto& p : personas)
      if (p.id == id) return p;
    throw LookupError("dataset: unknown user '" + id + "'");
  }

  std::vector<PreferenceTuple> tuples_of(std::string_view which) const {
    std::set<std::string> ids;
    for (const auto* p : split(which)) ids.insert(p->id);
    std::vector<PreferenceTuple> out;
    for (const auto& t : tuples)
      if (ids.contains(t.user)) out.push_back(t);
    return out;
  }

  Vocabulary vocabulary() const { return Vocabulary(build_pool().words()); }
};

inline std::string user_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "user-%04zu", i);
  return buf;
}

inline Dataset generate_dataset(const DataConfig& cfg) {
  if (cfg.users() == 0) throw Error("generate_dataset: no users requested");
  if (cfg.n_captions == 0 || cfg.pairs_per_caption == 0) throw Error("generate_dataset: empty caption plan");
  Dataset d;
  d.config = cfg;
  Rng master(cfg.seed);
  for (std::size_t i = 0; i < cfg.users(); ++i) {
    Rng rng(master.next());
    Persona p = sample_persona(rng, user_id(i), cfg.persona);
    p.split = i < cfg.train_users ? "train" : "test";
    auto ts = gen_tuples(rng, p, cfg.n_captions, cfg.pairs_per_caption);
    d.tuples.insert(d.tuples.end(), ts.begin(), ts.end());
    d.personas.push_back(std::move(p));
  }
  return d;
}

// Text embedded for an attribute node: the phrase followed by its style
// family, so hashed features of related attributes overlap.
inline std::string attribute_text(const std::string& attribute, const Pool& pool = build_pool()) {
  return attribute + " " + pool.clusters[pool.cluster_of(attribute)].name;
}

// Test users are left out unless asked for, since they are embedded
// inductively at evaluation time. Train users default to zero features,
// the same input a new user gets.
inline PreferenceGraph build_graph(const Dataset& d, bool include_test = false,
                                   std::size_t feature_dim = kAttributeDim,
                                   FeatureMode train_features = FeatureMode::zero) {
  PreferenceGraph g(feature_dim);
  for (const auto& a : build_pool().attributes()) g.add_attribute(a, attribute_text(a));
  for (const auto& p : d.personas) {
    if (p.split == "train") g.add_user(p.id, train_features, p.likes, p.dislikes);
    else if (include_test) g.add_user(p.id, FeatureMode::zero, p.likes, p.dislikes);
  }
  return g;
}

namespace detail {

inline nlohmann::ordered_json tuple_json(const PreferenceTuple& t) {
  return {{"user", t.user}, {"caption", t.caption}, {"cue", t.cue}, {"chosen", t.chosen}, {"rejected", t.rejected}};
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

}  // namespace detail

inline nlohmann::ordered_json manifest(const Dataset& d) {
  const std::size_t per_user = d.config.n_captions * d.config.pairs_per_caption * edit_types().size();
  return {{"seed", d.config.seed},
          {"users", d.personas.size()},
          {"train_users", d.config.train_users},
          {"test_users", d.config.test_users},
          {"n_captions", d.config.n_captions},
          {"pairs_per_caption", d.config.pairs_per_caption},
          {"edit_types", edit_types().size()},
          {"likes_per_persona", d.config.persona.likes},
          {"dislikes_per_persona", d.config.persona.dislikes},
          {"bias", d.config.persona.bias},
          {"tuples_per_user", per_user},
          {"instructions_per_user", 2 * per_user},
          {"tuples", d.tuples.size()},
          {"instructions", 2 * d.tuples.size()},
          {"pool_version", kPoolVersion},
          {"pool_size", build_pool().attributes().size()},
          {"objects", build_pool().objects.size()}};
}

inline std::string tuples_jsonl(const Dataset& d) {
  std::string out;
  for (const auto& t : d.tuples) out += detail::tuple_json(t).dump() + "\n";
  return out;
}

inline std::string personas_json(const Dataset& d) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : d.personas) {
    arr.push_back({{"id", p.id},
                   {"archetype", p.archetype},
                   {"split", p.split},
                   {"likes", p.likes},
                   {"dislikes", p.dislikes}});
  }
  return arr.dump(2) + "\n";
}

// Writes tuples.jsonl, personas.json, manifest.json and vocab.json.
inline void export_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "tuples.jsonl", tuples_jsonl(d));
  detail::write_file(dir / "personas.json", personas_json(d));
  detail::write_file(dir / "manifest.json", manifest(d).dump(2) + "\n");
  detail::write_file(dir / "vocab.json", d.vocabulary().dump());
}

inline Dataset import_dataset(const std::filesystem::path& dir) {
  using nlohmann::json;
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw Error("no dataset in " + dir.string() + " (run gen-data first)");
  }
  Dataset d;
  const json m = json::parse(detail::read_file(dir / "manifest.json"));
  try {
    d.config.seed = m.at("seed").get<std::uint64_t>();
    d.config.train_users = m.at("train_users").get<std::size_t>();
    d.config.test_users = m.at("test_users").get<std::size_t>();
    d.config.n_captions = m.at("n_captions").get<std::size_t>();
    d.config.pairs_per_caption = m.at("pairs_per_caption").get<std::size_t>();
    d.config.persona.likes = m.at("likes_per_persona").get<std::size_t>();
    d.config.persona.dislikes = m.at("dislikes_per_persona").get<std::size_t>();
    d.config.persona.bias = m.at("bias").get<double>();
    if (m.at("pool_version").get<int>() != kPoolVersion) throw FormatError("manifest.json: unsupported pool_version");
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }

  const json ps = json::parse(detail::read_file(dir / "personas.json"));
  if (!ps.is_array()) throw FormatError("personas.json: expected an array");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    try {
      Persona p{ps[i].at("id").get<std::string>(), ps[i].at("archetype").get<std::string>(),
                ps[i].at("split").get<std::string>(), ps[i].at("likes").get<std::vector<std::string>>(),
                ps[i].at("dislikes").get<std::vector<std::string>>()};
      if (p.split != "train" && p.split != "test") throw FormatError("bad split '" + p.split + "'");
      d.personas.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw FormatError("personas.json entry " + std::to_string(i) + ": " + e.what());
    }
  }

  std::istringstream lines(detail::read_file(dir / "tuples.jsonl"));
  std::size_t lineno = 0;
  const std::array<const char*, 5> keys = {"user", "caption", "cue", "chosen", "rejected"};
  for (std::string line; std::getline(lines, line);) {
    ++lineno;
    const std::string where = "tuples.jsonl line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!j.is_object() || j.size() != keys.size()) throw FormatError(where + ": expected an object with 5 keys");
    PreferenceTuple t;
    std::string* fields[] = {&t.user, &t.caption, &t.cue, &t.chosen, &t.rejected};
    for (std::size_t k = 0; k < keys.size(); ++k) {
      if (!j.contains(keys[k]) || !j[keys[k]].is_string()) {
        throw FormatError(where + ": missing or non-string \"" + keys[k] + "\"");
      }
      *fields[k] = j[keys[k]].get<std::string>();
    }
    if (t.chosen == t.rejected) throw FormatError(where + ": chosen equals rejected");
    d.tuples.push_back(std::move(t));
  }
  if (m.at("tuples").get<std::size_t>() != d.tuples.size()) {
    throw FormatError("manifest.json: tuple count does not match tuples.jsonl");
  }
  if (m.at("users").get<std::size_t>() != d.personas.size()) {
    throw FormatError("manifest.json: user count does not match personas.json");
  }
  return d;
}

}  // namespace cdpo
