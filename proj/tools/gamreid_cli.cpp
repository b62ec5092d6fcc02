// gamreid: one binary, one subcommand per task. Failures print a single
// `error: <category>: <message>` line on stderr and exit nonzero.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "gamreid/config.hpp"
#include "gamreid/grad_suite.hpp"
#include "gamreid/tensor_io.hpp"

using namespace gamreid;
namespace fs = std::filesystem;

namespace {

constexpr int kExitError = 2;

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + p.string());
}

void print_metrics(const EvalMetrics& m) {
  std::printf("rank1 %.4f  rank5 %.4f  rank10 %.4f  mAP %.4f  (queries %zu, skipped %zu)\n", m.rank1, m.rank5,
              m.rank10, m.mAP, m.num_queries, m.num_skipped);
}

// Config stored in a checkpoint; an unreadable block means the file does not
// belong to this tool.
RunConfig checkpoint_config(const CheckpointData& ck) {
  require(!ck.config_text.empty(), ErrorKind::integrity, "checkpoint carries no config block");
  try {
    return parse_config(ck.config_text);
  } catch (const Error& e) {
    fail(ErrorKind::integrity, std::string("checkpoint config block is invalid: ") + e.what());
  }
}

template <std::floating_point T>
Backbone<T> model_from_checkpoint(const CheckpointData& ck, const RunConfig& cfg) {
  Backbone<T> model(cfg.backbone(), 0);
  restore_model(ck, model);
  return model;
}

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
  std::string spec, out;
  bool overwrite = false;
};

int run_synth(const SynthArgs& a) {
  const RunConfig cfg = a.spec.empty() ? RunConfig{} : parse_config(read_text(a.spec));
  const auto index = generate_synthetic(cfg.synth, a.out, a.overwrite);
  std::printf("wrote %zu images (%zu train, %zu query, %zu gallery) to %s\n", index.entries.size(),
              index.split(Split::train).size(), index.split(Split::query).size(), index.split(Split::gallery).size(),
              a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume;
};

template <std::floating_point T>
int run_train_typed(const RunConfig& cfg, const std::string& text, const TrainArgs& a) {
  const auto data = load_train_data<T>(open_dataset(a.data), cfg.height, cfg.width);
  const auto res = run_training(cfg.train, cfg.backbone(), data, {a.out, a.resume, text, SIZE_MAX});
  std::printf("stages %zu  epochs %zu  clusters %zu  lambda %.6g  nmi %.4f\n", res.stages.size(), res.log.size(),
              res.stages.empty() ? data.train.size() : res.stages.back().num_clusters, res.lambda, res.nmi);
  if (res.retrieval) print_metrics(*res.retrieval);
  return 0;
}

int run_train(const TrainArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const std::string text = format_config(cfg);
  if (!a.resume.empty())
    require(load_checkpoint(a.resume).config_text == text, ErrorKind::integrity,
            "checkpoint " + a.resume + " was written under a different config");
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.txt", text);
  return cfg.precision == Precision::f32 ? run_train_typed<float>(cfg, text, a) : run_train_typed<double>(cfg, text, a);
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, out;
};

template <std::floating_point T>
int run_eval_typed(const CheckpointData& ck, const RunConfig& cfg, const EvalArgs& a) {
  auto model = model_from_checkpoint<T>(ck, cfg);
  const auto data = load_train_data<T>(open_dataset(a.data), cfg.height, cfg.width);
  require(data.has_eval(), ErrorKind::usage, a.data + " has no query/gallery split");
  const auto m = evaluate_retrieval(model, data);
  write_metrics(a.out, m);
  print_metrics(m);
  return 0;
}

int run_eval(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_config(ck);
  return cfg.precision == Precision::f32 ? run_eval_typed<float>(ck, cfg, a) : run_eval_typed<double>(ck, cfg, a);
}

// ---------------------------------------------------------------- count-params

struct CountArgs {
  std::string preset = "resnet50-gam";
  std::optional<std::size_t> groups, embedding_dim;
  bool assembled = false;
};

void print_breakdown(const char* label, const ParameterBreakdown& p) {
  std::printf("%-10s conv %zu  bn %zu  linear %zu  attention %zu  total %zu\n", label, p.conv, p.bn, p.linear,
              p.attention, p.total);
}

int run_count(const CountArgs& a) {
  const auto cfg = make_backbone_config(a.preset, a.groups, a.embedding_dim);
  const auto base_cfg = make_backbone_config("resnet50-baseline", std::nullopt, a.embedding_dim);
  const auto p = count_parameters(cfg), base = count_parameters(base_cfg);
  print_breakdown("baseline", base);
  print_breakdown(a.preset.c_str(), p);
  const double reduction = 100.0 * (1.0 - static_cast<double>(p.total) / static_cast<double>(base.total));
  std::printf("reduction %.2f%%\n", reduction);
  if (a.assembled) {
    const std::size_t built = Backbone<float>(cfg, 0).parameter_count();
    std::printf("assembled %zu (%s)\n", built, built == p.total ? "matches" : "MISMATCH");
    require(built == p.total, ErrorKind::integrity, "assembled parameter count differs from the analytic count");
  }
  return 0;
}

// ---------------------------------------------------------------- cluster

struct ClusterArgs {
  std::string embeddings, lambda = "0", out;
  double fraction = 0.04;
  std::size_t stages = 1, min_clusters = 0;
};

int run_cluster(const ClusterArgs& a) {
  const auto feats = load_tensor(a.embeddings);
  require(feats.dim() == 2, ErrorKind::shape, "embeddings must be [n, D], got " + shape_str(feats.shape()));
  MergeSchedule sched;
  sched.merge_fraction = a.fraction;
  sched.min_clusters = a.min_clusters;
  sched.lambda = a.lambda == "auto" ? auto_lambda(feats) : detail::parse_double("lambda", a.lambda);
  sched.validate();
  const std::size_t n = feats.extent(0), floor = sched.floor(n);
  auto bank = MemoryBank::singletons(feats);
  fs::create_directories(a.out);
  std::ofstream merges(fs::path(a.out) / "merges.tsv");
  merges << "stage\ta\tb\tdistance\n";
  for (std::size_t s = 0; s < a.stages && bank.num_clusters() > floor; ++s) {
    const std::size_t count = std::min(sched.merges_per_stage(n), bank.num_clusters() - floor);
    for (const auto& r : merge_step(bank, count, sched.lambda))
      merges << s << '\t' << r.a << '\t' << r.b << '\t' << format_metric(r.distance) << '\n';
    std::printf("stage %zu: %zu clusters\n", s, bank.num_clusters());
  }
  std::ofstream asg(fs::path(a.out) / "assignments.tsv");
  write_assignments(asg, bank);
  require(static_cast<bool>(merges) && static_cast<bool>(asg), ErrorKind::io, "cannot write into " + a.out);
  std::printf("lambda %.6g, final clusters %zu\n", sched.lambda, bank.num_clusters());
  return 0;
}

// ---------------------------------------------------------------- grad-check

struct GradArgs {
  std::string module = "all";
  std::size_t rounds = 8;
  std::uint64_t seed = 0;
};

int run_grad(const GradArgs& a) {
  constexpr double kTolerance = 1e-4;
  const auto cases = run_grad_suite(a.module, a.rounds, a.seed);
  double worst = 0;
  std::string worst_name;
  for (const auto& c : cases)
    if (!(c.error <= worst)) {
      worst = c.error;
      worst_name = c.module + "/" + c.name;
    }
  std::printf("%zu cases, max relative error %.3e (%s)\n", cases.size(), worst, worst_name.c_str());
  return worst <= kTolerance ? 0 : 1;
}

// ---------------------------------------------------------------- export-attn

struct AttnArgs {
  std::string checkpoint, image, out;
  std::size_t layer = 0;
};

template <std::floating_point T>
int run_attn_typed(const CheckpointData& ck, const RunConfig& cfg, const AttnArgs& a) {
  auto model = model_from_checkpoint<T>(ck, cfg);
  require(a.layer < model.num_blocks(), ErrorKind::usage,
          "layer " + std::to_string(a.layer) + " out of range (network has " + std::to_string(model.num_blocks()) +
              " blocks)");
  const auto img = cast_tensor<T>(load_image(a.image, cfg.height, cfg.width));
  ForwardTrace<T> trace;
  {
    NoGradGuard<T> guard;
    model.features(stack_images(std::vector<BasicTensor<T>>{img}), Mode::eval, &trace);
  }
  const auto& maps = trace.spatial_maps[a.layer];
  require(maps.defined(), ErrorKind::usage, "block " + std::to_string(a.layer) + " has no attention module");
  fs::create_directories(a.out);
  const auto path = fs::path(a.out) / ("attention_layer" + std::to_string(a.layer) + ".pgm");
  export_attention_map(maps, 0, path);
  std::printf("wrote %s (%zux%zu)\n", path.c_str(), maps.extent(3), maps.extent(2));
  return 0;
}

int run_attn(const AttnArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_config(ck);
  return cfg.precision == Precision::f32 ? run_attn_typed<float>(ck, cfg, a) : run_attn_typed<double>(ck, cfg, a);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gamreid: unsupervised person re-identification with grouped attention"};
  app.require_subcommand(1);
  app.footer("\n" + config_help());

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "render a synthetic identity/camera set as PPM files");
  c_synth->add_option("--spec", synth.spec, "config file; only the synth_* keys are used")->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "output dataset directory")->required();
  c_synth->add_flag("--overwrite", synth.overwrite, "replace an existing non-empty directory");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "bottom-up unsupervised training (IDL + ACL with cluster merging)");
  c_train->add_option("--config", train.config, "config file (see keys below)")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", train.data, "dataset root (index.tsv or Market-1501 layout)")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_train->add_option("--out", train.out, "run directory")->required();
  c_train->add_option("--resume", train.resume, "stage checkpoint to continue from")->check(CLI::ExistingFile);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "CMC and mAP of a checkpoint on the query/gallery split");
  c_eval->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", eval.data, "dataset root")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", eval.out, "directory for metrics.txt and metrics.kv")->required();

  CountArgs count;
  auto* c_count = app.add_subcommand("count-params", "analytic parameter breakdown and reduction vs the baseline");
  c_count->add_option("--preset", count.preset, "backbone preset")->capture_default_str();
  c_count->add_option("--groups", count.groups, "filter groups per bottleneck");
  c_count->add_option("--embedding-dim", count.embedding_dim, "embedding size D");
  c_count->add_flag("--assembled", count.assembled, "also build the model and compare tensor counts");

  ClusterArgs cluster;
  auto* c_cluster = app.add_subcommand("cluster", "standalone balanced centroid-linkage merging of saved embeddings");
  c_cluster->add_option("--embeddings", cluster.embeddings, "GAMT tensor [n, D]")->required()->check(CLI::ExistingFile);
  c_cluster->add_option("--lambda", cluster.lambda, "balance weight, or 'auto'")->capture_default_str();
  c_cluster->add_option("--fraction", cluster.fraction, "merges per stage as a fraction of n")->capture_default_str();
  c_cluster->add_option("--stages", cluster.stages, "merge stages")->capture_default_str();
  c_cluster->add_option("--min-clusters", cluster.min_clusters, "cluster floor; 0 means ceil(0.1 n)")
      ->capture_default_str();
  c_cluster->add_option("--out", cluster.out, "directory for assignments.tsv and merges.tsv")->required();

  GradArgs grad;
  auto* c_grad = app.add_subcommand("grad-check", "finite-difference gradient sweep; exit 0 iff max error <= 1e-4");
  c_grad->add_option("--module", grad.module, "tensor, attention, backbone, idl, acl or all")->capture_default_str();
  c_grad->add_option("--rounds", grad.rounds, "randomised rounds per module")->capture_default_str();
  c_grad->add_option("--seed", grad.seed, "sweep seed")->capture_default_str();

  AttnArgs attn;
  auto* c_attn = app.add_subcommand("export-attn", "write one block's spatial attention map as PGM");
  c_attn->add_option("--checkpoint", attn.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  c_attn->add_option("--image", attn.image, "PPM image")->required()->check(CLI::ExistingFile);
  c_attn->add_option("--layer", attn.layer, "bottleneck index in network order")->capture_default_str();
  c_attn->add_option("--out", attn.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return kExitError;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_train->parsed()) return run_train(train);
    if (c_eval->parsed()) return run_eval(eval);
    if (c_count->parsed()) return run_count(count);
    if (c_cluster->parsed()) return run_cluster(cluster);
    if (c_grad->parsed()) return run_grad(grad);
    if (c_attn->parsed()) return run_attn(attn);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(to_string(e.kind())).c_str(), e.what());
    return kExitError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: io: %s\n", e.what());
    return kExitError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return kExitError;
  }
  return kExitError;
}
