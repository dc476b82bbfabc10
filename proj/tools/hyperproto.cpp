/* Copyright 2026 The hyperproto Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */

// hyperproto command-line driver: embed | synth | train | eval | project | explain.
//
// Every command prints its resolved configuration as one JSON line on stdout
// before doing any work, and stamps the config hash into each file it
// writes. Failures print one JSON line on stderr; exit code 2 means the
// invocation itself was wrong, 1 means the work failed.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperproto/binary_io.hpp"
#include "hyperproto/embed.hpp"
#include "hyperproto/evalmetrics.hpp"
#include "hyperproto/explain.hpp"
#include "hyperproto/hierarchy.hpp"
#include "hyperproto/protonet.hpp"
#include "hyperproto/tensorio.hpp"
#include "hyperproto/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hyperproto;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Thrown for invocations that are well-formed flags but contradict each other.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_ints(const std::string& s, std::size_t n, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw UsageError("--" + flag + ": '" + s + "' is not a comma-separated integer list");
    }
  }
  if (out.size() != n) throw UsageError("--" + flag + " expects " + std::to_string(n) + " integers, got '" + s + "'");
  for (int v : out)
    if (v < 1) throw UsageError("--" + flag + " entries must be >= 1");
  return out;
}

std::string config_hash(const json& cfg) { return hex64(fnv1a64(cfg.dump())); }

// Resolved config: every option of the subcommand by long name. The output
// location and the config file path are reported but kept out of the hash,
// so the same run written elsewhere carries the same hash.
json resolved_config(const CLI::App& sub) {
  json cfg = json::object();
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name == "help-all" || name == "config" || name == "out") continue;
    if (o->get_expected_max() == 0) {
      cfg[name] = o->count() > 0;
    } else if (o->get_expected_max() > 1) {
      cfg[name] = o->count() > 0 ? json(o->results()) : json(o->get_default_str());
    } else {
      cfg[name] = o->count() > 0 ? o->results().back() : o->get_default_str();
    }
  }
  return cfg;
}

void print_json_line(std::ostream& os, const json& j) { os << j.dump() << std::endl; }

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_text_file(p, j.dump(1) + "\n");
}

HierarchyTree load_tree(const std::string& path) { return HierarchyTree::parse(read_text_file(path)); }

std::pair<DatasetManifest, HierarchyTree> load_data(const std::string& manifest, const std::string& hierarchy) {
  if (hierarchy.empty()) return load_dataset(manifest);
  HierarchyTree tree = load_tree(hierarchy);
  return {load_manifest(manifest, tree), std::move(tree)};
}

struct Templates {
  TemplateMatrix phi;
  std::uint64_t file_hash = 0;
};

Templates load_template_file(const std::string& path, const HierarchyTree& tree) {
  const Bytes bytes = read_file(path);
  Templates t{load_templates(bytes), fnv1a64(bytes)};
  if (t.phi.node_count() != tree.size())
    throw LoadError("templates " + path + " cover " + std::to_string(t.phi.node_count()) + " nodes, hierarchy has " +
                    std::to_string(tree.size()));
  return t;
}

ModelState load_model(const std::string& path, const Templates& t, const HierarchyTree& tree) {
  ModelState m = load_checkpoint(read_file(path), t.phi, t.file_hash).model;
  if (m.templates.node_count() != tree.size()) throw LoadError("checkpoint does not match the hierarchy");
  return m;
}

// Expands a JSON config file into flags placed ahead of the real ones, so
// command-line flags win under the take-last policy.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  std::size_t at = 0, len = 0;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      at = i;
      len = 2;
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      at = i;
      len = 1;
      break;
    }
  }
  if (path.empty()) return args;
  json cfg;
  try {
    cfg = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  } catch (const LoadError& e) {
    throw UsageError(e.what());
  }
  if (!cfg.is_object()) throw UsageError("config " + path + " must be a JSON object");
  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        injected.push_back(flag);
        injected.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      }
    } else {
      injected.push_back(flag);
      injected.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  args.erase(args.begin() + static_cast<std::ptrdiff_t>(at), args.begin() + static_cast<std::ptrdiff_t>(at + len));
  // right after the subcommand name
  std::size_t sub = 1;
  while (sub < args.size() && args[sub].rfind("-", 0) == 0) ++sub;
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(std::min(sub + 1, args.size())), injected.begin(),
              injected.end());
  return args;
}

// Command options ------------------------------------------------------------

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  std::string config;
};

void add_common(CLI::App* sub, Common& c, bool with_seed = true) {
  sub->add_option("--out", c.out, "Output directory")->required();
  if (with_seed) sub->add_option("--seed", c.seed, "Global seed");
  sub->add_option("--config", c.config, "JSON file whose keys mirror the long flags");
}

struct EmbedArgs {
  Common common;
  std::string hierarchy;
  EmbedConfig cfg;
};

struct SynthArgs {
  Common common;
  std::string hierarchy;
  int clips_per_class = 20;
  std::string dims = "4,4,2,64";
  double sigma = 0.2;
  double background_gain = SynthOptions{}.background_gain;
  int clips_per_video = SynthOptions{}.clips_per_video;
  std::vector<std::string> splits{"train", "test"};
};

struct ModelArgs {
  Common common;
  std::string manifest, hierarchy, templates, checkpoint;
};

struct TrainArgs {
  ModelArgs io;
  std::string variant = "cpg";
  std::string head = "hyperbolic";
  int prototypes_per_class = ModelConfig{}.child_prototypes;
  int ancestor_prototypes = ModelConfig{}.ancestor_prototypes;
  int channels = 0;
  std::string proto = "1,1,1";
  TrainConfig cfg;
};

struct ExplainArgs {
  ModelArgs io;
  std::vector<std::string> clips;
  int max_clips = 5;
  int k = 1;
  std::string size = "32,32";
};

void add_model_io(CLI::App* sub, ModelArgs& a, bool need_checkpoint) {
  add_common(sub, a.common, false);
  sub->add_option("--manifest", a.manifest, "Dataset manifest JSON")->required()->check(CLI::ExistingFile);
  sub->add_option("--hierarchy", a.hierarchy, "Override the hierarchy the manifest points at")
      ->check(CLI::ExistingFile);
  sub->add_option("--templates", a.templates, "Template file from 'embed'")->required()->check(CLI::ExistingFile);
  auto* ck = sub->add_option("--checkpoint", a.checkpoint, "Model checkpoint");
  if (need_checkpoint) ck->required()->check(CLI::ExistingFile);
}

// Commands -------------------------------------------------------------------

json cmd_embed(const EmbedArgs& a, const std::string& hash) {
  const HierarchyTree tree = load_tree(a.hierarchy);
  EmbedConfig cfg = a.cfg;
  cfg.seed = a.common.seed;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const EmbedResult r = train_embeddings(tree, cfg);
  const fs::path out(a.common.out);
  fs::create_directories(out);
  write_file(out / "templates.hptm", save_templates(r.phi));
  json trace = json::array();
  for (const auto& e : r.trace)
    trace.push_back({{"epoch", e.epoch}, {"total", e.total}, {"hierarchy", e.hierarchy}, {"separation", e.separation}});
  write_json(out / "embed_trace.json", {{"config_hash", hash}, {"trace", std::move(trace)}});
  return {{"templates", (out / "templates.hptm").string()},
          {"final_loss", r.trace.empty() ? 0.0 : r.trace.back().total}};
}

json cmd_synth(const SynthArgs& a, const std::string& hash) {
  const HierarchyTree tree = load_tree(a.hierarchy);
  const auto d = parse_ints(a.dims, 4, "dims");
  SynthOptions opt;
  opt.background_gain = a.background_gain;
  opt.clips_per_video = a.clips_per_video;
  const fs::path out(a.common.out);
  fs::create_directories(out);
  // a private copy keeps the dataset self-contained
  write_text_file(out / "hierarchy.json", tree.serialize());
  json written = json::array();
  for (const auto& split : a.splits) {
    DatasetManifest m;
    try {
      m = generate_synthetic(tree, a.clips_per_class, {d[0], d[1], d[2], d[3]}, a.sigma, a.common.seed, split, opt);
    } catch (const ArgumentError& e) {
      throw UsageError(e.what());
    }
    m.hierarchy = "hierarchy.json";
    const fs::path path = write_dataset(m, out, split + ".json");
    json j = manifest_to_json(m);
    j["config_hash"] = hash;
    write_json(path, j);
    written.push_back({{"split", split}, {"manifest", path.string()}, {"clips", m.clips.size()}});
  }
  return {{"manifests", std::move(written)}};
}

json cmd_train(const TrainArgs& a, const CLI::App& sub, const std::string& hash) {
  auto [data, tree] = load_data(a.io.manifest, a.io.hierarchy);
  const Templates t = load_template_file(a.io.templates, tree);

  TrainConfig tc = a.cfg;
  tc.seed = a.io.common.seed;
  ModelConfig mc;
  if (a.variant != "base" && a.variant != "cpg") throw UsageError("--variant must be base or cpg");
  tc.variant = a.variant == "base" ? Variant::base : Variant::cpg;
  if (tc.variant == Variant::base && sub.get_option("--ancestor-prototypes")->count() > 0 && a.ancestor_prototypes > 0)
    throw UsageError("--variant base has no ancestor prototypes; drop --ancestor-prototypes or set it to 0");
  if (a.head != "hyperbolic" && a.head != "euclidean") throw UsageError("--head must be hyperbolic or euclidean");
  mc.head = a.head == "euclidean" ? HeadMode::euclidean : HeadMode::hyperbolic;
  mc.child_prototypes = a.prototypes_per_class;
  mc.ancestor_prototypes = a.ancestor_prototypes;
  mc.in_channels = data.dims.d;
  mc.channels = a.channels > 0 ? a.channels : data.dims.d;
  const auto p = parse_ints(a.proto, 3, "proto");
  mc.proto = {p[0], p[1], p[2]};
  if (p[0] > data.dims.w || p[1] > data.dims.h || p[2] > data.dims.t)
    throw UsageError("--proto " + a.proto + " is larger than the feature grid");
  try {
    mc.validate();
    tc.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  const TrainResult r = run_training(data, tree, t.phi, mc, tc);
  const fs::path out(a.io.common.out);
  fs::create_directories(out);
  const fs::path ckpt = a.io.checkpoint.empty() ? out / "model.hpms" : fs::path(a.io.checkpoint);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  write_file(ckpt, save_checkpoint(r.model, t.file_hash, fnv1a64(hash)));
  write_text_file(out / "train_report.jsonl", report_to_jsonl(r.report, hash));
  for (const auto& w : r.report.warnings) print_json_line(std::cerr, {{"warning", w}});
  const MetricsReport m = evaluate_epoch(r.model, data, tree);
  json summary{{"config_hash", hash}, {"split", data.split}, {"metrics", report_to_json(m, tree)}};
  write_json(out / "train_metrics.json", summary);
  return {{"checkpoint", ckpt.string()},
          {"train_accuracy", m.clip.class_acc},
          {"final_loss", r.report.epochs.empty() ? json(nullptr) : loss_json(r.report.epochs.back().loss)}};
}

json cmd_eval(const ModelArgs& a, const std::string& hash) {
  auto [data, tree] = load_data(a.manifest, a.hierarchy);
  const Templates t = load_template_file(a.templates, tree);
  const ModelState model = load_model(a.checkpoint, t, tree);
  const PredictionSet preds = predict_clips(data, model, tree);
  const MetricsReport r = full_report(preds, tree);
  const fs::path out(a.common.out);
  json j = report_to_json(r, tree);
  j["config_hash"] = hash;
  j["split"] = data.split;
  write_json(out / "metrics.json", j);
  write_text_file(out / "metrics.csv", "# config_hash " + hash + "\n" + report_to_csv(r));
  std::string rows = "# config_hash " + hash + "\nclip_id,video_id,truth,predicted\n";
  for (const auto& p : preds)
    rows += p.clip_id + "," + p.video_id + "," + std::to_string(p.truth) + "," + std::to_string(p.predicted) + "\n";
  write_text_file(out / "predictions.csv", rows);
  return {{"clip", {{"accuracy", r.clip.class_acc}, {"sibling_accuracy", r.clip.sibling},
                    {"cousin_accuracy", r.clip.cousin}}},
          {"video", {{"accuracy", r.video.class_acc}, {"sibling_accuracy", r.video.sibling},
                     {"cousin_accuracy", r.video.cousin}}}};
}

json cmd_project(const ModelArgs& a, const std::string& hash) {
  auto [data, tree] = load_data(a.manifest, a.hierarchy);
  const Templates t = load_template_file(a.templates, tree);
  ModelState model = load_model(a.checkpoint, t, tree);
  TrainReport rep;
  rep.projections = project_prototypes(model, data, tree, model.config.variant);
  const fs::path out(a.common.out);
  fs::create_directories(out);
  write_file(out / "projected.hpms", save_checkpoint(model, t.file_hash, fnv1a64(hash)));
  std::string lines;
  int moved = 0;
  for (const auto& p : rep.projections) {
    json j{{"config_hash", hash}, {"prototype", p.prototype}, {"owner", p.owner}, {"moved", p.moved}};
    if (p.moved) {
      ++moved;
      j["source"] = {{"clip_id", p.clip_id}, {"position", {p.w, p.h, p.t}}};
      j["pre_distance"] = p.pre_distance;
      j["post_distance"] = p.post_distance;
    }
    lines += j.dump() + "\n";
  }
  write_text_file(out / "projection.jsonl", lines);
  return {{"checkpoint", (out / "projected.hpms").string()}, {"moved", moved},
          {"unchanged", static_cast<int>(rep.projections.size()) - moved}};
}

json cmd_explain(const ExplainArgs& a, const std::string& hash) {
  auto [data, tree] = load_data(a.io.manifest, a.io.hierarchy);
  const Templates t = load_template_file(a.io.templates, tree);
  const ModelState model = load_model(a.io.checkpoint, t, tree);
  const auto size = parse_ints(a.size, 2, "size");
  if (a.k < 1) throw UsageError("--k must be >= 1");

  std::vector<const ClipRecord*> picked;
  if (a.clips.empty()) {
    for (const auto& c : data.clips) {
      if (static_cast<int>(picked.size()) >= a.max_clips) break;
      picked.push_back(&c);
    }
  } else {
    for (const auto& id : a.clips) {
      const auto it = std::find_if(data.clips.begin(), data.clips.end(), [&](const auto& c) { return c.clip_id == id; });
      if (it == data.clips.end()) throw UsageError("--clip " + id + " is not in " + a.io.manifest);
      picked.push_back(&*it);
    }
  }
  ExplainOptions opt;
  opt.k = a.k;
  opt.out_w = size[0];
  opt.out_h = size[1];
  const fs::path out(a.io.common.out);
  json index = json::array();
  for (const ClipRecord* c : picked) {
    const Explanation ex = explain_clip(*c, model, tree, opt);
    const auto files = render(ex, out, nullptr, hash);
    index.push_back({{"clip_id", c->clip_id}, {"predicted", ex.predicted}, {"truth", c->label},
                     {"files", files.size()}});
  }
  write_json(out / "explain_index.json", {{"config_hash", hash}, {"clips", index}});
  return {{"clips", std::move(index)}};
}

void print_error(const char* kind, const std::string& type, const std::string& message) {
  print_json_line(std::cerr, {{"error", kind}, {"type", type}, {"message", message}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical prototype networks on spatiotemporal feature grids"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  EmbedArgs embed;
  SynthArgs synth;
  TrainArgs train;
  ModelArgs eval, project;
  ExplainArgs explain;

  auto* se = app.add_subcommand("embed", "Learn hyperbolic class templates for a hierarchy");
  auto* ss = app.add_subcommand("synth", "Write a synthetic dataset with hierarchy-structured class signal");
  auto* st = app.add_subcommand("train", "Train a prototype network");
  auto* sv = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  auto* sp = app.add_subcommand("project", "Project prototypes onto their nearest training patches");
  auto* sx = app.add_subcommand("explain", "Render multi-level explanations for clips");
  for (auto* s : {se, ss, st, sv, sp, sx}) {
    s->option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  add_common(se, embed.common);
  se->add_option("--hierarchy", embed.hierarchy, "Hierarchy JSON")->required()->check(CLI::ExistingFile);
  se->add_option("--dim", embed.cfg.dim, "Ball dimension");
  se->add_option("--epochs", embed.cfg.epochs);
  se->add_option("--lr", embed.cfg.learning_rate);
  se->add_option("--lambda", embed.cfg.lambda, "Separation weight");
  se->add_option("--gamma", embed.cfg.gamma, "Non-sibling orthogonality weight");
  se->add_option("--negatives", embed.cfg.negatives_per_positive, "Negatives per positive pair");

  add_common(ss, synth.common);
  ss->add_option("--hierarchy", synth.hierarchy, "Hierarchy JSON")->required()->check(CLI::ExistingFile);
  ss->add_option("--clips-per-class", synth.clips_per_class);
  ss->add_option("--dims", synth.dims, "W,H,T,D");
  ss->add_option("--sigma", synth.sigma, "Noise std inside the signal block");
  ss->add_option("--background-gain", synth.background_gain, "Background noise std as a multiple of sigma");
  ss->add_option("--clips-per-video", synth.clips_per_video);
  ss->add_option("--split", synth.splits, "Splits to write")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  add_model_io(st, train.io, false);
  st->add_option("--seed", train.io.common.seed, "Global seed");
  st->add_option("--variant", train.variant, "base | cpg");
  st->add_option("--head", train.head, "hyperbolic | euclidean");
  st->add_option("--prototypes-per-class", train.prototypes_per_class);
  st->add_option("--ancestor-prototypes", train.ancestor_prototypes);
  st->add_option("--channels", train.channels, "Adapter width, 0 keeps the input width");
  st->add_option("--proto", train.proto, "Prototype extent W,H,T");
  st->add_option("--epochs", train.cfg.total_epochs);
  st->add_option("--warmup", train.cfg.warmup_epochs);
  st->add_option("--projection-period", train.cfg.projection_period);
  st->add_option("--finetune-epochs", train.cfg.finetune_epochs_after_projection);
  st->add_option("--batch", train.cfg.batch_size);
  st->add_option("--head-lr", train.cfg.joint_lr.head, "Head rate in joint epochs");

  add_model_io(sv, eval, true);
  add_model_io(sp, project, true);

  add_model_io(sx, explain.io, true);
  sx->add_option("--clip", explain.clips, "Clip id to explain (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sx->add_option("--max-clips", explain.max_clips, "Without --clip, explain this many clips from the top");
  sx->add_option("--k", explain.k, "Prototypes per level");
  sx->add_option("--size", explain.size, "Heatmap W,H");

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(std::move(args));
    // the vector overload takes arguments in reverse, without the program name
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(std::move(rev));
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.get_name(), e.what());
    return kExitUsage;
  } catch (const UsageError& e) {
    print_error("usage", "UsageError", e.what());
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const json cfg = resolved_config(*sub);
  const std::string hash = config_hash(cfg);
  json header{{"command", sub->get_name()}, {"config", cfg}, {"config_hash", hash}};
  if (const auto* o = sub->get_option_no_throw("--out"); o && o->count() > 0) header["out"] = o->results().back();
  print_json_line(std::cout, header);

  try {
    json result;
    const std::string name = sub->get_name();
    if (name == "embed") result = cmd_embed(embed, hash);
    else if (name == "synth") result = cmd_synth(synth, hash);
    else if (name == "train") result = cmd_train(train, *sub, hash);
    else if (name == "eval") result = cmd_eval(eval, hash);
    else if (name == "project") result = cmd_project(project, hash);
    else result = cmd_explain(explain, hash);
    print_json_line(std::cout, {{"command", name}, {"status", "ok"}, {"config_hash", hash}, {"result", result}});
    return 0;
  } catch (const UsageError& e) {
    print_error("usage", "UsageError", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    print_error("usage", "ConfigError", e.what());
    return kExitUsage;
  } catch (const TrainingError& e) {
    print_error("runtime", "TrainingError", e.what());
  } catch (const LoadError& e) {
    print_error("runtime", "LoadError", e.what());
  } catch (const FormatError& e) {
    print_error("runtime", "FormatError", e.what());
  } catch (const ParseError& e) {
    print_error("runtime", "ParseError", e.what());
  } catch (const std::exception& e) {
    print_error("runtime", "Error", e.what());
  }
  return kExitRuntime;
}
