// cdpo-cli: the pipeline as subcommands over one run directory.
//
//   gen-data -> build-graph -> pretrain-gnn -> sft -> cdpo -> benchmark
//
// Every stage writes <run>/<stage>/ with its outputs, metrics and the
// effective config it ran with.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cdpo/checkpoint.hpp"
#include "cdpo/config.hpp"
#include "cdpo/datagen.hpp"
#include "cdpo/eval.hpp"
#include "cdpo/gnn.hpp"
#include "cdpo/pipeline.hpp"
#include "cdpo/trainer.hpp"

namespace fs = std::filesystem;
using namespace cdpo;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

struct Common {
  std::string run = "run";
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--run", c.run, "Run directory")->capture_default_str();
  sub->add_option("--config", c.config_file, "JSON config overlay");
  sub->add_option("--set", c.sets, "Override one config field, e.g. --set train.cdpo.steps=100 (repeatable)");
  sub->add_option("--seed", c.seed, "Seed for this run");
}

// "a.b.c=v" -> {"a":{"b":{"c":v}}}; v is JSON when it parses, else a string.
json set_patch(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("--set expects key.path=value, got '" + s + "'");
  const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ks(key);
  for (std::string p; std::getline(ks, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

// Previous run config (if any), then --config, then --set and flags.
RunConfig effective_config(const Common& c, const json& extra = json::object()) {
  json j = json::object();
  const fs::path saved = fs::path(c.run) / "config.json";
  if (fs::exists(saved)) j = json::parse(detail::read_file(saved));
  if (!c.config_file.empty()) {
    try {
      j.merge_patch(json::parse(detail::read_file(c.config_file)));
    } catch (const json::parse_error& e) {
      throw FormatError("config " + c.config_file + ": " + e.what());
    }
  }
  for (const auto& s : c.sets) j.merge_patch(set_patch(s));
  j.merge_patch(extra);
  if (c.seed) j["seed"] = *c.seed;
  return run_config_from_json(j);
}

fs::path stage_dir(const Common& c, const std::string& stage, const RunConfig& cfg) {
  const fs::path dir = fs::path(c.run) / stage;
  fs::create_directories(dir);
  const std::string text = to_json(cfg).dump(2) + "\n";
  detail::write_file(fs::path(c.run) / "config.json", text);
  detail::write_file(dir / "config.json", text);
  return dir;
}

void require(const fs::path& p, const std::string& subcommand) {
  if (!fs::exists(p)) {
    throw MissingPrerequisite("missing " + p.string() + "; run `cdpo-cli " + subcommand + " --run " +
                              p.parent_path().parent_path().string() + "` first");
  }
}

Dataset load_data(const Common& c) {
  require(fs::path(c.run) / "data" / "manifest.json", "gen-data");
  return import_dataset(fs::path(c.run) / "data");
}

PreferenceGraph load_graph(const Common& c, const RunConfig& cfg) {
  const auto p = fs::path(c.run) / "graph" / "graph.json";
  require(p, "build-graph");
  return PreferenceGraph::from_json(json::parse(detail::read_file(p)), cfg.feature_dim);
}

Checkpoint load_ckpt(const fs::path& p, const std::string& subcommand) {
  require(p, subcommand);
  return Checkpoint::load(p.string());
}

fs::path model_path(const Common& c, const std::string& name) {
  if (name == "sft") return fs::path(c.run) / "sft" / "policy.ckpt";
  if (name == "gnn") return fs::path(c.run) / "gnn" / "gnn.ckpt";
  return fs::path(c.run) / name / "state.ckpt";
}

std::string producer(const std::string& name) {
  if (name == "sft") return "sft";
  if (name == "gnn") return "pretrain-gnn";
  return "cdpo --name " + name;
}

// Policy plus, for user-conditioned models, the GNN it was trained with.
Method load_method(const Common& c, const std::string& name) {
  const auto ck = load_ckpt(model_path(c, name), producer(name));
  Method m{name, load_policy(ck), std::nullopt};
  const bool soft = ck.config.contains("cdpo") && ck.config["cdpo"].value("use_soft_tokens", false);
  if (soft) {
    auto g = load_gnn(ck);
    m.gnn = std::move(g);
  }
  return m;
}

Prepared load_prepared(const Common& c, const RunConfig& cfg) {
  Prepared p;
  p.data = load_data(c);
  p.vocab = p.data.vocabulary();
  p.graph = load_graph(c, cfg);
  p.gnn = load_gnn(load_ckpt(fs::path(c.run) / "gnn" / "gnn.ckpt", "pretrain-gnn"));
  p.sft = load_policy(load_ckpt(fs::path(c.run) / "sft" / "policy.ckpt", "sft"));
  p.train_tuples = tokenize_split(p.data, p.vocab, "train");
  return p;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  for (const auto& v : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw Error("not a number: '" + v + "'");
    }
  }
  return out;
}

struct JsonlSink {
  std::ofstream out;
  JsonlSink(const fs::path& p, bool append) : out(p, append ? std::ios::app : std::ios::trunc) {
    if (!out) throw Error("cannot write " + p.string());
  }
  void operator()(const ordered_json& j) { out << j.dump() << '\n'; }
};

// Embedding for `user`: a training user is encoded in place, anyone else is
// added to a copy of the graph with the given (or dataset) profile.
std::vector<double> user_vector(const PreferenceGraph& graph, const GnnModel& gnn, const Dataset& data,
                                const std::string& user, const std::vector<std::string>& likes,
                                const std::vector<std::string>& dislikes) {
  if (likes.empty() && dislikes.empty() && graph.has_user(user)) return gnn.encode(graph, user);
  PreferenceGraph g = graph;
  if (!likes.empty() || !dislikes.empty()) {
    if (g.has_user(user)) throw Error("user '" + user + "' already exists; pick another id for a new user");
    return embed_new_user(g, gnn, likes, dislikes, user).h;
  }
  const auto& ps = data.personas;
  if (std::none_of(ps.begin(), ps.end(), [&](const Persona& q) { return q.id == user; })) {
    throw LookupError("unknown user '" + user + "'; give --likes and/or --dislikes to embed a new user");
  }
  const auto& p = data.persona(user);
  return embed_new_user(g, gnn, p.likes, p.dislikes, user).h;
}

// ---- subcommands ----

int cmd_gen_data(const Common& c, std::optional<std::size_t> users, std::optional<std::size_t> test_users) {
  json extra = json::object();
  auto cfg = effective_config(c);
  std::size_t test = test_users.value_or(cfg.data.test_users);
  if (users) {
    if (*users <= test) throw Error("--users must exceed the number of test users (" + std::to_string(test) + ")");
    extra["data"]["train_users"] = *users - test;
  }
  if (test_users) extra["data"]["test_users"] = test;
  cfg = effective_config(c, extra);
  const auto dir = stage_dir(c, "data", cfg);
  const auto d = generate_dataset(cfg.data_config());
  export_dataset(d, dir);
  std::cout << "wrote " << d.personas.size() << " users, " << d.tuples.size() << " tuples to " << dir.string() << "\n";
  return 0;
}

int cmd_build_graph(const Common& c) {
  const auto cfg = effective_config(c);
  const auto d = load_data(c);
  const auto dir = stage_dir(c, "graph", cfg);
  const auto g = build_graph(d, false, cfg.feature_dim, cfg.user_features);
  g.save((dir / "graph.json").string());
  std::cout << "graph: " << g.users().size() << " users, " << g.attributes().size() << " attributes, "
            << g.edges().size() << " edges\n";
  return 0;
}

int cmd_pretrain_gnn(const Common& c) {
  const auto cfg = effective_config(c);
  const auto g = load_graph(c, cfg);
  const auto dir = stage_dir(c, "gnn", cfg);
  auto r = pretrain(g, g.split_edges(cfg.seed), cfg.gnn_config());
  gnn_checkpoint(r.model).save((dir / "gnn.ckpt").string());
  ordered_json m{{"best_epoch", r.best_epoch},
                 {"best_val", {{"loss", r.best_val.loss}, {"accuracy", r.best_val.accuracy}}},
                 {"test", {{"loss", r.test.loss}, {"accuracy", r.test.accuracy}}},
                 {"train_loss", r.train_loss},
                 {"val_loss", r.val_loss},
                 {"val_accuracy", r.val_accuracy}};
  detail::write_file(dir / "metrics.json", m.dump(2) + "\n");
  std::printf("gnn: best epoch %d, val accuracy %.3f, test accuracy %.3f\n", r.best_epoch, r.best_val.accuracy,
              r.test.accuracy);
  return 0;
}

int cmd_sft(const Common& c) {
  const auto cfg = effective_config(c);
  const auto d = load_data(c);
  const auto vocab = d.vocabulary();
  const auto dir = stage_dir(c, "sft", cfg);
  JsonlSink sink(dir / "metrics.jsonl", false);
  const auto records = sft_records(tokenize_split(d, vocab, "train"));
  auto r = run_sft(PolicyModel(cfg.policy_config(vocab.size())), records, cfg.sft_config(),
                   [&](const ordered_json& j) { sink(j); });
  policy_checkpoint(r.policy).save((dir / "policy.ckpt").string());
  std::printf("sft: %d steps, final loss %.4f\n", r.steps, r.step_loss.back());
  return 0;
}

struct CdpoFlags {
  std::string variant = "C-DPO";
  std::string name;
  std::optional<double> lambda;
  std::optional<std::size_t> k;
  int max_steps = -1;
  int save_every = 0;
  bool resume = false;
};

int cmd_cdpo(const Common& c, const CdpoFlags& f) {
  const auto cfg = effective_config(c);
  std::optional<Variant> v;
  for (const auto& s : standard_variants(cfg.dpo))
    if (s.name == f.variant) v = s;
  if (!v) throw Error("unknown variant '" + f.variant + "' (expected C-DPO, DPO-User or DPO-Vanilla)");
  if (f.lambda) v->lambda = *f.lambda;
  if (f.k) v->k = *f.k;
  v->name = f.name.empty() ? f.variant : f.name;
  if (v->name == "sft" || v->name == "gnn" || v->name == "data" || v->name == "graph") {
    throw Error("--name '" + v->name + "' is reserved for a pipeline stage");
  }

  const auto p = load_prepared(c, cfg);
  const auto dir = stage_dir(c, v->name, cfg);
  detail::write_file(dir / "variant.json", ordered_json{{"name", v->name},
                                                        {"soft_tokens", v->soft_tokens},
                                                        {"lambda", v->lambda},
                                                        {"k", v->k}}
                                                   .dump(2) + "\n");
  CdpoTrainer t(variant_config(cfg, *v), p.sft, p.gnn, p.graph, p.train_tuples);
  const auto state = dir / "state.ckpt";
  if (f.resume && fs::exists(state)) {
    t.restore(Checkpoint::load(state.string()));
    std::cout << "resumed " << v->name << " at step " << t.current_step() << "\n";
  }
  JsonlSink sink(dir / "metrics.jsonl", f.resume);
  int ran = 0;
  while (!t.done() && (f.max_steps < 0 || ran < f.max_steps)) {
    sink(t.step().json());
    ++ran;
    if (f.save_every > 0 && ran % f.save_every == 0) t.checkpoint().save(state.string());
  }
  t.checkpoint().save(state.string());
  std::cout << v->name << ": step " << t.current_step() << "/" << t.config().steps << (t.done() ? "" : " (partial)")
            << "\n";
  return 0;
}

struct UserFlags {
  std::string model = "C-DPO";
  std::string user = "new";
  std::string likes, dislikes;
};

int cmd_embed_user(const Common& c, const UserFlags& u) {
  const auto cfg = effective_config(c);
  const auto graph = load_graph(c, cfg);
  const auto ck = load_ckpt(model_path(c, u.model), producer(u.model));
  const auto gnn = load_gnn(ck);
  Dataset data;
  if (split_list(u.likes).empty() && split_list(u.dislikes).empty() && !graph.has_user(u.user)) data = load_data(c);
  const auto h = user_vector(graph, gnn, data, u.user, split_list(u.likes), split_list(u.dislikes));
  std::cout << ordered_json{{"user", u.user}, {"model", u.model}, {"h", h}}.dump() << "\n";
  return 0;
}

struct GenerateFlags {
  UserFlags user;
  std::string caption;
  std::string cue;
  double temperature = 0.0;
};

int cmd_generate(const Common& c, const GenerateFlags& g) {
  const auto cfg = effective_config(c);
  const auto m = load_method(c, g.user.model);
  const auto data = load_data(c);
  const auto vocab = data.vocabulary();
  UserVector h;
  if (m.gnn) {
    const auto graph = load_graph(c, cfg);
    h = user_vector(graph, *m.gnn, data, g.user.user, split_list(g.user.likes), split_list(g.user.dislikes));
  } else if (!g.user.likes.empty() || !g.user.dislikes.empty()) {
    std::cerr << "note: " << g.user.model << " is not user-conditioned; --likes/--dislikes are ignored\n";
  }
  std::vector<std::string> cues = split_list(g.cue);
  if (cues.empty())
    for (const auto& e : edit_types()) cues.push_back(e.name);
  DecodeOptions opt;
  opt.temperature = g.temperature;
  opt.seed = cfg.seed;
  const auto caption = vocab.encode(g.caption);
  for (const auto& cue : cues) {
    std::cout << cue << ": " << vocab.decode(decode(m.policy, h, caption, vocab.encode(cue), opt)) << "\n";
  }
  return 0;
}

int cmd_benchmark(const Common& c, const std::string& models) {
  const auto cfg = effective_config(c);
  auto names = split_list(models);
  if (names.empty()) throw Error("--models is empty");
  const auto data = load_data(c);
  const auto graph = load_graph(c, cfg);
  std::vector<Method> methods;
  for (const auto& n : names) methods.push_back(load_method(c, n));
  const auto dir = stage_dir(c, "benchmark", cfg);
  const auto rep = benchmark(methods, data, graph, data.vocabulary(), cfg.eval);
  detail::write_file(dir / "report.json", rep.json().dump(2) + "\n");
  detail::write_file(dir / "table.txt", rep.table());
  detail::write_file(dir / "per_user.csv", rep.csv());
  std::string samples;
  for (const auto& s : rep.samples) {
    samples += ordered_json{{"method", s.method}, {"condition", s.condition}, {"user", s.user},
                            {"caption", s.caption}, {"cue", s.cue},             {"output", s.output}}
                   .dump() +
               "\n";
  }
  detail::write_file(dir / "samples.jsonl", samples);
  std::cout << rep.table();
  return 0;
}

int cmd_ablate(const Common& c, const std::string& param_name, const std::string& values) {
  const auto cfg = effective_config(c);
  const auto param = parse_param(param_name);
  auto vs = parse_values(values);
  if (vs.empty()) vs = param == AblationParam::lambda ? std::vector<double>{0.01, 0.15, 0.50} : std::vector<double>{2, 3, 5, 12};
  const auto p = load_prepared(c, cfg);
  const auto dir = stage_dir(c, "ablate-" + cdpo::param_name(param), cfg);
  const auto r = ablation_grid(p, cfg, param, vs, [](const std::string& s) { std::cout << s << "\n"; });
  detail::write_file(dir / "report.json", r.json().dump(2) + "\n");
  detail::write_file(dir / "table.txt", r.table());
  detail::write_file(dir / "per_user.csv", r.report.csv());
  std::cout << r.table();
  return 0;
}

void report_error(const std::string& kind, const std::string& msg) {
  std::cerr << ordered_json{{"error", kind}, {"message", msg}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative preference tuning at desk scale"};
  app.require_subcommand(1);
  std::function<int()> action;
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate personas and preference tuples");
  add_common(gen, common);
  std::optional<std::size_t> users, test_users;
  gen->add_option("--users", users, "Total users (train + test)");
  gen->add_option("--test-users", test_users, "Held-out users");
  gen->callback([&] { action = [&] { return cmd_gen_data(common, users, test_users); }; });

  auto* bg = app.add_subcommand("build-graph", "Build the user-attribute graph from the training users");
  add_common(bg, common);
  bg->callback([&] { action = [&] { return cmd_build_graph(common); }; });

  auto* pg = app.add_subcommand("pretrain-gnn", "Pretrain the graph encoder on edge polarity");
  add_common(pg, common);
  pg->callback([&] { action = [&] { return cmd_pretrain_gnn(common); }; });

  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning on chosen instructions");
  add_common(sft, common);
  sft->callback([&] { action = [&] { return cmd_sft(common); }; });

  CdpoFlags cf;
  auto* cd = app.add_subcommand("cdpo", "Preference fine-tuning from the SFT policy and pretrained GNN");
  add_common(cd, common);
  cd->add_option("--variant", cf.variant, "C-DPO, DPO-User or DPO-Vanilla")->capture_default_str();
  cd->add_option("--name", cf.name, "Output name under the run directory (default: the variant)");
  cd->add_option("--lambda", cf.lambda, "Neighbour weight (overrides the variant)");
  cd->add_option("--k", cf.k, "Neighbour count (overrides the variant)");
  cd->add_option("--max-steps", cf.max_steps, "Stop after this many steps in this invocation");
  cd->add_option("--save-every", cf.save_every, "Also checkpoint every N steps");
  cd->add_flag("--resume", cf.resume, "Continue from <run>/<name>/state.ckpt");
  cd->callback([&] { action = [&] { return cmd_cdpo(common, cf); }; });

  UserFlags uf;
  auto* eu = app.add_subcommand("embed-user", "Print a user's embedding (new users are embedded inductively)");
  add_common(eu, common);
  eu->add_option("--model", uf.model, "gnn, or a cdpo output name")->capture_default_str();
  eu->add_option("--user", uf.user, "User id")->capture_default_str();
  eu->add_option("--likes", uf.likes, "Comma-separated liked attributes (new user)");
  eu->add_option("--dislikes", uf.dislikes, "Comma-separated disliked attributes (new user)");
  eu->callback([&] { action = [&] { return cmd_embed_user(common, uf); }; });

  GenerateFlags gf;
  auto* ge = app.add_subcommand("generate", "Generate edit instructions for a caption");
  add_common(ge, common);
  ge->add_option("--model", gf.user.model, "sft, or a cdpo output name")->capture_default_str();
  ge->add_option("--user", gf.user.user, "User id; with --likes/--dislikes a new user")->capture_default_str();
  ge->add_option("--likes", gf.user.likes, "Comma-separated liked attributes");
  ge->add_option("--dislikes", gf.user.dislikes, "Comma-separated disliked attributes");
  ge->add_option("--caption", gf.caption, "Image caption, e.g. \"a bicycle\"")->required();
  ge->add_option("--cue", gf.cue, "Comma-separated edit types (default: all)");
  ge->add_option("--temperature", gf.temperature, "0 for greedy")->capture_default_str();
  ge->callback([&] { action = [&] { return cmd_generate(common, gf); }; });

  std::string models = "sft,DPO-Vanilla,DPO-User,C-DPO";
  auto* bm = app.add_subcommand("benchmark", "Score models on the held-out users");
  add_common(bm, common);
  bm->add_option("--models", models, "Comma-separated model names, in table order")->capture_default_str();
  bm->callback([&] { action = [&] { return cmd_benchmark(common, models); }; });

  std::string param = "lambda", values;
  auto* ab = app.add_subcommand("ablate", "Sweep lambda or K for C-DPO");
  add_common(ab, common);
  ab->add_option("--param", param, "lambda or K")->capture_default_str();
  ab->add_option("--values", values, "Comma-separated grid (default: 0.01,0.15,0.50 or 2,3,5,12)");
  ab->callback([&] { action = [&] { return cmd_ablate(common, param, values); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action();
  } catch (const MissingPrerequisite& e) {
    report_error("missing_prerequisite", e.what());
    return 3;
  } catch (const FormatError& e) {
    report_error("format", e.what());
    return 1;
  } catch (const LookupError& e) {
    report_error("lookup", e.what());
    return 1;
  } catch (const ShapeError& e) {
    report_error("shape", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("error", e.what());
    return 1;
  }
}
