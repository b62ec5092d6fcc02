#pragma once

// Joint IDL + ACL training: SGD with momentum, stage loop with instance-bank
// and memory-bank maintenance, cluster merges, per-stage checkpoints.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "gamreid/acl.hpp"
#include "gamreid/backbone.hpp"
#include "gamreid/checkpoint.hpp"
#include "gamreid/dataio.hpp"
#include "gamreid/eval.hpp"
#include "gamreid/idl.hpp"
#include "gamreid/image.hpp"

namespace gamreid {

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_init = 0.1;
  std::size_t lr_drop_epoch = 25;
  double lr_drop_factor = 10;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau = 0.1;
  std::size_t epochs_per_stage = 2;
  std::size_t stages = 15;
  std::uint64_t seed = 0;
  Reduction idl_reduction = Reduction::sum;
  Reduction acl_reduction = Reduction::mean;
  double bank_momentum = 0.5;
  bool merge_enabled = true;
  MergeSchedule merge;
  bool lambda_auto = true;  // overrides merge.lambda with auto_lambda on the initial features
  AugmentationSpec augmentation;
  bool stage_eval = true;  // evaluate retrieval after every stage when eval data is present

  void validate(std::size_t n) const {
    require(batch_size >= 1, ErrorKind::config, "batch_size must be positive");
    require(n == 0 || batch_size <= n, ErrorKind::config,
            "batch_size " + std::to_string(batch_size) + " exceeds the " + std::to_string(n) + " training images");
    require(lr_init > 0 && lr_drop_factor > 0 && tau > 0, ErrorKind::config,
            "lr_init, lr_drop_factor and tau must be positive");
    require(momentum >= 0 && momentum < 1, ErrorKind::config, "momentum must lie in [0,1)");
    require(weight_decay >= 0, ErrorKind::config, "weight_decay must be non-negative");
    require(bank_momentum >= 0 && bank_momentum < 1, ErrorKind::config, "bank_momentum must lie in [0,1)");
    merge.validate();
    augmentation.validate();
  }
};

/// Step size for a global (cross-stage) epoch counter.
inline double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  return epoch < cfg.lr_drop_epoch ? cfg.lr_init : cfg.lr_init / cfg.lr_drop_factor;
}

template <std::floating_point T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // one per parameter, in visit order
};

/// v <- m v + g + wd p ; p <- p - lr v. Parameters without a gradient see g = 0.
template <std::floating_point T>
void sgd_step(std::vector<std::pair<std::string, BasicTensor<T>>>& params, SgdState<T>& state, double lr,
              double momentum, double weight_decay) {
  if (state.velocity.empty())
    for (const auto& [name, p] : params) state.velocity.emplace_back(p.numel(), T(0));
  require(state.velocity.size() == params.size(), ErrorKind::integrity, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto g = p.grad();
    for (auto v : g)
      require(std::isfinite(v), ErrorKind::numeric, "non-finite gradient in '" + name + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    auto& v = state.velocity[i];
    require(v.size() == p.numel(), ErrorKind::shape, "velocity for '" + name + "' has the wrong size");
    const auto g = p.grad();
    auto w = p.data();
    const bool has = !g.empty();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? static_cast<double>(g[k]) : 0.0;
      v[k] = static_cast<T>(momentum * v[k] + gk + weight_decay * w[k]);
      w[k] = static_cast<T>(w[k] - lr * v[k]);
    }
    p.zero_grad();
  }
}

template <std::floating_point T, std::floating_point S>
BasicTensor<T> cast_tensor(const BasicTensor<S>& x) {
  if constexpr (std::is_same_v<T, S>) {
    return x;
  } else {
    return BasicTensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  }
}

/// Eval-mode embeddings of every image, batched, without recording.
template <std::floating_point T>
BasicTensor<T> embed_all(Backbone<T>& model, const std::vector<BasicTensor<T>>& images, std::size_t batch = 64) {
  require(!images.empty(), ErrorKind::usage, "embed_all: no images");
  NoGradGuard<T> guard;
  const std::size_t D = model.config().embedding_dim;
  std::vector<T> out;
  out.reserve(images.size() * D);
  for (std::size_t s = 0; s < images.size(); s += batch) {
    const std::size_t e = std::min(images.size(), s + batch);
    std::vector<BasicTensor<T>> chunk(images.begin() + static_cast<std::ptrdiff_t>(s),
                                      images.begin() + static_cast<std::ptrdiff_t>(e));
    auto emb = model.embed(stack_images(chunk), Mode::eval);
    out.insert(out.end(), emb.data().begin(), emb.data().end());
  }
  return BasicTensor<T>({images.size(), D}, std::move(out));
}

template <std::floating_point T>
std::vector<EvalItem> eval_items(Backbone<T>& model, const std::vector<BasicTensor<T>>& images,
                                 const std::vector<int>& identities, const std::vector<int>& cameras) {
  const auto emb = embed_all(model, images);
  const std::size_t D = emb.extent(1);
  std::vector<EvalItem> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto row = emb.data().subspan(i * D, D);
    out.push_back({std::vector<double>(row.begin(), row.end()), identities[i], cameras[i]});
  }
  return out;
}

struct StepLosses {
  double idl = 0, acl = 0, total = 0;
};

template <std::floating_point T>
struct JointLossT {
  BasicTensor<T> idl, acl, total, embeddings;
};

/// Embeds the batch and its augmentations in train mode and forms
/// J = J_idl + J_acl. Nothing is back-propagated here.
template <std::floating_point T>
JointLossT<T> joint_loss(Backbone<T>& model, const InstanceBank& ibank, const MemoryBank& mbank,
                         const std::vector<BasicTensor<T>>& images, const std::vector<std::size_t>& indices,
                         const TrainConfig& cfg, std::size_t epoch) {
  std::vector<BasicTensor<T>> plain, aug;
  std::vector<std::size_t> clusters;
  for (auto i : indices) {
    plain.push_back(images[i]);
    aug.push_back(augment(images[i], cfg.augmentation, mix_seed({cfg.seed, i}), epoch));
    clusters.push_back(mbank.assignment()[i]);
  }
  auto f_aug = model.embed(stack_images(aug), Mode::train);
  auto f = model.embed(stack_images(plain), Mode::train);
  auto j_idl = idl_loss(indices, f_aug, f, ibank, cfg.tau, cfg.idl_reduction);
  auto j_acl = acl_loss(f, clusters, mbank, cfg.tau, cfg.acl_reduction);
  return {j_idl, j_acl, add(j_idl, j_acl), f};
}

/// One optimisation step on the batch `indices`: a single backward pass of
/// J_idl + J_acl, SGD, then the instance-bank refresh from plain embeddings.
template <std::floating_point T>
StepLosses train_step(Backbone<T>& model, SgdState<T>& opt, InstanceBank& ibank, const MemoryBank& mbank,
                      const std::vector<BasicTensor<T>>& images, const std::vector<std::size_t>& indices,
                      const TrainConfig& cfg, std::size_t epoch, double lr) {
  auto j = joint_loss(model, ibank, mbank, images, indices, cfg, epoch);
  StepLosses out{static_cast<double>(j.idl.item()), static_cast<double>(j.acl.item()),
                 static_cast<double>(j.total.item())};
  require(std::isfinite(out.total), ErrorKind::numeric, "training loss is not finite");
  backward(j.total);
  auto params = model.parameters();
  sgd_step(params, opt, lr, cfg.momentum, cfg.weight_decay);
  const auto& f = j.embeddings;
  const std::size_t D = f.extent(1);
  for (std::size_t b = 0; b < indices.size(); ++b) ibank.update(indices[b], f.data().subspan(b * D, D), cfg.bank_momentum);
  return out;
}

struct TrainLogRow {
  std::size_t epoch = 0, stage = 0;
  double j_idl = 0, j_acl = 0, j_total = 0;
  std::size_t num_clusters = 0;
  double lr = 0;
};

struct StageMetrics {
  std::size_t stage = 0, num_clusters = 0;
  double nmi = 0;
  std::optional<EvalMetrics> retrieval;
};

/// Images plus the labels used only for post-hoc scoring.
template <std::floating_point T>
struct TrainData {
  std::vector<BasicTensor<T>> train;
  std::vector<int> train_ids;
  std::vector<BasicTensor<T>> query, gallery;
  std::vector<int> query_ids, query_cams, gallery_ids, gallery_cams;

  bool has_eval() const { return !query.empty() && !gallery.empty(); }
};

template <std::floating_point T>
void add_view(TrainData<T>& d, Split split, BasicTensor<T> img, int identity, int camera) {
  switch (split) {
    case Split::train:
      d.train.push_back(std::move(img));
      d.train_ids.push_back(identity);
      break;
    case Split::query:
      d.query.push_back(std::move(img));
      d.query_ids.push_back(identity);
      d.query_cams.push_back(camera);
      break;
    case Split::gallery:
      d.gallery.push_back(std::move(img));
      d.gallery_ids.push_back(identity);
      d.gallery_cams.push_back(camera);
      break;
  }
}

/// A synthetic set rendered in memory, in index order.
template <std::floating_point T>
TrainData<T> synthetic_train_data(const SynthSpec& spec) {
  TrainData<T> d;
  for (const auto& [v, img] : render_synthetic(spec)) add_view(d, v.split, cast_tensor<T>(img), v.identity, v.camera);
  return d;
}

/// Every split of an indexed dataset, loaded at height x width.
template <std::floating_point T>
TrainData<T> load_train_data(const DatasetIndex& index, std::size_t height, std::size_t width) {
  TrainData<T> d;
  for (const auto& e : index.entries)
    add_view(d, e.split, cast_tensor<T>(load_image(index.root / e.path, height, width)), e.identity, e.camera);
  return d;
}

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::vector<StageMetrics> stages;
  std::vector<std::size_t> assignment;
  double lambda = 0;
  double nmi = 0;
  std::optional<EvalMetrics> retrieval;
};

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.17g\t%.17g\t%.17g\t%zu\t%.17g", r.epoch, r.stage, r.j_idl, r.j_acl, r.j_total,
                r.num_clusters, r.lr);
  return buf;
}

inline void write_train_log(const std::filesystem::path& file, const std::vector<TrainLogRow>& log) {
  std::ofstream os(file);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + file.string());
  os << "epoch\tstage\tJ_idl\tJ_acl\tJ_total\tnum_clusters\tlr\n";
  for (const auto& r : log) os << format_log_row(r) << '\n';
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + file.string());
}

inline void write_stage_metrics(const std::filesystem::path& file, const std::vector<StageMetrics>& stages) {
  std::ofstream os(file);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + file.string());
  os << "stage\tnum_clusters\tnmi\trank1\tmAP\n";
  for (const auto& s : stages) {
    os << s.stage << '\t' << s.num_clusters << '\t' << format_metric(s.nmi) << '\t'
       << (s.retrieval ? format_metric(s.retrieval->rank1) : "-") << '\t'
       << (s.retrieval ? format_metric(s.retrieval->mAP) : "-") << '\n';
  }
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + file.string());
}

inline std::string checkpoint_name(std::size_t stage) { return "stage_" + std::to_string(stage) + ".gamc"; }

/// Everything the stage loop needs to continue exactly where it stopped.
template <std::floating_point T>
struct TrainState {
  Backbone<T> model;
  SgdState<T> opt;
  MemoryBank mbank;
  double lambda = 0;
  std::size_t stage = 0;  // completed stages
  std::size_t epoch = 0;  // completed global epochs
  std::vector<TrainLogRow> log;
  std::vector<StageMetrics> stages;
};

template <std::floating_point T>
CheckpointData make_checkpoint(TrainState<T>& st, const std::string& config_text) {
  CheckpointData ck;
  ck.config_text = config_text;
  store_model(ck, st.model);
  const auto params = st.model.parameters();
  for (std::size_t i = 0; i < st.opt.velocity.size(); ++i)
    ck.add("optim.velocity." + params[i].first, BasicTensor<T>({st.opt.velocity[i].size()}, st.opt.velocity[i]));
  const auto& mb = st.mbank;
  ck.tensors.emplace_back("bank.centroids", Tensor({mb.num_clusters(), mb.dim()}, mb.centroids()));
  ck.tensors.emplace_back("bank.sizes", Tensor({mb.num_clusters()}, std::vector<double>(mb.sizes().begin(), mb.sizes().end())));
  ck.tensors.emplace_back("bank.assignment", Tensor({mb.num_instances()}, std::vector<double>(mb.assignment().begin(), mb.assignment().end())));
  ck.tensors.emplace_back("state", Tensor({3}, {st.lambda, static_cast<double>(st.stage), static_cast<double>(st.epoch)}));
  // Row tables are stored flat behind their row count, so an empty table is still a valid tensor.
  std::vector<double> rows{static_cast<double>(st.log.size())};
  for (const auto& r : st.log)
    rows.insert(rows.end(), {static_cast<double>(r.epoch), static_cast<double>(r.stage), r.j_idl, r.j_acl, r.j_total,
                             static_cast<double>(r.num_clusters), r.lr});
  const std::size_t log_len = rows.size();
  ck.tensors.emplace_back("log", Tensor({log_len}, std::move(rows)));
  std::vector<double> srows{static_cast<double>(st.stages.size())};
  for (const auto& s : st.stages) {
    const auto& m = s.retrieval;
    srows.insert(srows.end(), {static_cast<double>(s.stage), static_cast<double>(s.num_clusters), s.nmi,
                               m ? 1.0 : 0.0, m ? m->rank1 : 0, m ? m->rank5 : 0, m ? m->rank10 : 0, m ? m->mAP : 0,
                               m ? static_cast<double>(m->num_queries) : 0, m ? static_cast<double>(m->num_skipped) : 0});
  }
  const std::size_t stage_len = srows.size();
  ck.tensors.emplace_back("stage_metrics", Tensor({stage_len}, std::move(srows)));
  return ck;
}

template <std::floating_point T>
void restore_state(const CheckpointData& ck, TrainState<T>& st) {
  restore_model(ck, st.model);
  const auto params = st.model.parameters();
  st.opt.velocity.clear();
  for (const auto& [name, p] : params) {
    const auto* v = ck.find("optim.velocity." + name);
    if (!v) {
      st.opt.velocity.clear();
      break;
    }
    require(v->numel() == p.numel(), ErrorKind::integrity, "velocity for '" + name + "' has the wrong size");
    st.opt.velocity.emplace_back(v->data().begin(), v->data().end());
  }
  const auto& sizes = ck.at("bank.sizes");
  const auto& asg = ck.at("bank.assignment");
  std::vector<std::size_t> s(sizes.numel()), a(asg.numel());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<std::size_t>(sizes[i]);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<std::size_t>(asg[i]);
  const auto& cent = ck.at("bank.centroids");
  st.mbank = MemoryBank(cent, std::move(s), std::move(a));
  // The constructor renormalises; put the stored bits back so a resume is exact.
  MergeAccess::centroids(st.mbank).assign(cent.data().begin(), cent.data().end());
  const auto& state = ck.at("state");
  require(state.numel() == 3, ErrorKind::integrity, "checkpoint state block is malformed");
  st.lambda = state[0];
  st.stage = static_cast<std::size_t>(state[1]);
  st.epoch = static_cast<std::size_t>(state[2]);
  auto table = [](const Tensor& t, std::size_t width) {
    const auto rows = static_cast<std::size_t>(t[0]);
    require(t.numel() == 1 + rows * width, ErrorKind::integrity, "checkpoint table is malformed");
    return rows;
  };
  const auto& log = ck.at("log");
  st.log.clear();
  for (std::size_t r = 0; r < table(log, 7); ++r) {
    const double* p = log.data().data() + 1 + r * 7;
    st.log.push_back({static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]), p[2], p[3], p[4],
                      static_cast<std::size_t>(p[5]), p[6]});
  }
  const auto& sm = ck.at("stage_metrics");
  st.stages.clear();
  for (std::size_t r = 0; r < table(sm, 10); ++r) {
    const double* p = sm.data().data() + 1 + r * 10;
    StageMetrics m{static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]), p[2], std::nullopt};
    if (p[3] != 0)
      m.retrieval = EvalMetrics{p[4], p[5], p[6], p[7], static_cast<std::size_t>(p[8]), static_cast<std::size_t>(p[9])};
    st.stages.push_back(m);
  }
}

inline std::uint64_t model_seed(const TrainConfig& cfg) { return mix_seed({cfg.seed, 0x6d6f64656cULL}); }

struct RunOptions {
  std::filesystem::path out_dir;         // empty: nothing is written
  std::filesystem::path resume;          // stage checkpoint to continue from
  std::string config_text;               // echoed into checkpoints
  std::size_t max_stages = SIZE_MAX;     // stop early (used to produce resume points)
};

template <std::floating_point T>
EvalMetrics evaluate_retrieval(Backbone<T>& model, const TrainData<T>& data) {
  return evaluate(eval_items(model, data.query, data.query_ids, data.query_cams),
                  eval_items(model, data.gallery, data.gallery_ids, data.gallery_cams));
}

/// Full stage loop: train_stage, then merge, until the stage count or the
/// cluster floor is reached.
template <std::floating_point T>
TrainResult run_training(const TrainConfig& cfg, const BackboneConfig& arch, const TrainData<T>& data,
                         const RunOptions& opts = {}) {
  const std::size_t n = data.train.size();
  require(n >= 2, ErrorKind::usage, "training needs at least two images");
  cfg.validate(n);
  require(data.train_ids.empty() || data.train_ids.size() == n, ErrorKind::usage, "one identity per training image");
  const bool write = !opts.out_dir.empty();
  if (write) std::filesystem::create_directories(opts.out_dir);

  TrainState<T> st{Backbone<T>(arch, model_seed(cfg)), {}, {}, 0, 0, 0, {}, {}};
  if (!opts.resume.empty()) {
    restore_state(load_checkpoint(opts.resume), st);
    require(st.mbank.num_instances() == n, ErrorKind::integrity, "checkpoint memory bank does not match the data size");
  } else {
    const auto feats = embed_all(st.model, data.train);
    st.mbank = MemoryBank::singletons(feats);
    st.lambda = cfg.lambda_auto ? auto_lambda(feats) : cfg.merge.lambda;
  }

  const std::size_t floor = cfg.merge.floor(n);
  auto nmi_now = [&] {
    if (data.train_ids.empty()) return 0.0;
    return normalized_mutual_information(data.train_ids, st.mbank.assignment());
  };

  while (st.stage < cfg.stages && st.stage < opts.max_stages) {
    const std::size_t stage = st.stage;
    if (cfg.epochs_per_stage > 0) {
      InstanceBank ibank(embed_all(st.model, data.train));
      for (std::size_t e = 0; e < cfg.epochs_per_stage; ++e) {
        const std::size_t epoch = st.epoch;
        const double lr = learning_rate(cfg, epoch);
        Rng rng(mix_seed({cfg.seed, 0x62617463ULL, epoch}));
        const auto perm = permutation(rng, n);
        StepLosses sum;
        std::size_t steps = 0;
        for (std::size_t s = 0; s < n; s += cfg.batch_size) {
          std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(s),
                                       perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg.batch_size)));
          const auto l = train_step(st.model, st.opt, ibank, st.mbank, data.train, idx, cfg, epoch, lr);
          sum.idl += l.idl;
          sum.acl += l.acl;
          sum.total += l.total;
          ++steps;
        }
        update_bank(st.mbank, embed_all(st.model, data.train));
        const double k = static_cast<double>(steps);
        st.log.push_back({epoch, stage, sum.idl / k, sum.acl / k, sum.total / k, st.mbank.num_clusters(), lr});
        ++st.epoch;
      }
    }
    if (cfg.merge_enabled && st.mbank.num_clusters() > floor) {
      const std::size_t merges = std::min(cfg.merge.merges_per_stage(n), st.mbank.num_clusters() - floor);
      merge_step(st.mbank, merges, st.lambda);
    }
    StageMetrics sm{stage, st.mbank.num_clusters(), nmi_now(), std::nullopt};
    if (cfg.stage_eval && data.has_eval()) sm.retrieval = evaluate_retrieval(st.model, data);
    st.stages.push_back(sm);
    ++st.stage;
    if (write) save_checkpoint(opts.out_dir / checkpoint_name(stage), make_checkpoint(st, opts.config_text));
    if (cfg.merge_enabled && st.mbank.num_clusters() <= floor) break;
  }

  TrainResult res;
  res.log = st.log;
  res.stages = st.stages;
  res.assignment = st.mbank.assignment();
  res.lambda = st.lambda;
  res.nmi = nmi_now();
  if (data.has_eval()) res.retrieval = evaluate_retrieval(st.model, data);
  if (write) {
    write_train_log(opts.out_dir / "train_log.tsv", res.log);
    write_stage_metrics(opts.out_dir / "stage_metrics.tsv", res.stages);
    save_checkpoint(opts.out_dir / "final.gamc", make_checkpoint(st, opts.config_text));
    std::ofstream asg(opts.out_dir / "assignments.tsv");
    write_assignments(asg, st.mbank);
    if (res.retrieval) write_metrics(opts.out_dir, *res.retrieval, {{"nmi", format_metric(res.nmi)},
                                                                    {"num_clusters", std::to_string(st.mbank.num_clusters())}});
  }
  return res;
}

}  // namespace gamreid
