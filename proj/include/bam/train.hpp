#pragma once

// Optimization orchestration: adaptive-moment training with a max-corrected
// second moment, reduce-on-plateau scheduling, EMA shadows, and the
// posterior-specific schedules (ensemble fan-out, the SWAG collection
// window, natural-gradient variational stepping, post-hoc curvature fits).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "bam/bald.hpp"
#include "bam/errors.hpp"
#include "bam/io.hpp"
#include "bam/loss.hpp"
#include "bam/model.hpp"
#include "bam/posterior.hpp"
#include "bam/random.hpp"

namespace bam {

enum class PosteriorKind { none, ensemble, swag, ivon, laplace };

inline PosteriorKind posterior_kind_from_string(const std::string& s) {
  if (s == "none") return PosteriorKind::none;
  if (s == "ensemble") return PosteriorKind::ensemble;
  if (s == "swag") return PosteriorKind::swag;
  if (s == "ivon") return PosteriorKind::ivon;
  if (s == "laplace") return PosteriorKind::laplace;
  throw DomainError("unknown posterior kind: " + s);
}

inline const char* to_string(PosteriorKind k) {
  switch (k) {
    case PosteriorKind::none: return "none";
    case PosteriorKind::ensemble: return "ensemble";
    case PosteriorKind::swag: return "swag";
    case PosteriorKind::ivon: return "ivon";
    case PosteriorKind::laplace: return "laplace";
  }
  return "?";
}

// Adaptive moments with the non-decreasing second-moment correction,
// beta = (0.9, 0.999), eps 1e-8.
struct AmsgradState {
  std::vector<double> m, v, vhat;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AmsgradState(std::size_t dim = 0) : m(dim, 0.0), v(dim, 0.0), vhat(dim, 0.0) {}

  void step(std::vector<double>& theta, const std::vector<double>& grad, double lr) {
    if (theta.size() != m.size() || grad.size() != m.size())
      throw ShapeError("optimizer state size mismatch");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      vhat[i] = std::max(vhat[i], v[i]);
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(vhat[i] / c2) + eps);
    }
  }
};

// Halves nothing on its own: multiplies the rate by `factor` once `patience`
// consecutive epochs fail to improve the monitored loss by a relative 1e-4.
struct PlateauScheduler {
  double lr;
  double factor = 0.9;
  int patience = 50;
  double rel_threshold = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;

  explicit PlateauScheduler(double lr0 = 0.01) : lr(lr0) {}

  void observe(double loss) {
    if (loss < best * (1.0 - rel_threshold)) {
      best = loss;
      bad = 0;
      return;
    }
    if (++bad >= patience) {
      lr *= factor;
      bad = 0;
    }
  }
};

// shadow <- decay * shadow + (1 - decay) * theta
struct EmaState {
  double decay = 0.99;
  std::vector<double> shadow;

  EmaState() = default;
  EmaState(double d, std::vector<double> init) : decay(d), shadow(std::move(init)) {}

  void update(const std::vector<double>& theta) {
    if (theta.size() != shadow.size()) throw ShapeError("EMA size mismatch");
    for (std::size_t i = 0; i < shadow.size(); ++i)
      shadow[i] = decay * shadow[i] + (1.0 - decay) * theta[i];
  }
};

struct TrainConfig {
  double max_lr = 0.01;
  double plateau_factor = 0.9;
  int plateau_patience = 50;
  double plateau_threshold = 1e-4;
  int batch_size = 32;
  int epochs = 100;
  double ema_decay = 0.99;
  LossKind loss = LossKind::nll_jef;
  double lambda_e = 1.0;
  double lambda_f = 1.0;
  PosteriorKind posterior = PosteriorKind::none;
  int ensemble_members = 4;
  int swag_rank = 20;
  double swag_start_fraction = 0.6;
  IvonHyper ivon;
  double ivon_h0 = 0.1;
  double laplace_prior = 1.0;
  int posterior_samples = 8;

  void validate() const {
    if (!(max_lr > 0.0)) throw DomainError("max_lr must be positive");
    if (!(ema_decay > 0.0) || !(ema_decay < 1.0)) throw DomainError("ema_decay must be in (0,1)");
    if (plateau_patience < 1) throw DomainError("plateau patience must be at least 1");
    if (!(plateau_factor > 0.0) || !(plateau_factor < 1.0))
      throw DomainError("plateau factor must be in (0,1)");
    if (batch_size < 1) throw DomainError("batch_size must be at least 1");
    if (epochs < 0) throw DomainError("epochs must be non-negative");
    if (!(swag_start_fraction >= 0.0) || !(swag_start_fraction <= 1.0))
      throw DomainError("swag_start_fraction must be in [0,1]");
    if (posterior == PosteriorKind::ensemble && ensemble_members < 2)
      throw DomainError("ensembles need at least 2 members");
    if (posterior == PosteriorKind::swag && swag_rank < 2) throw DomainError("SWAG rank must be at least 2");
    if (posterior == PosteriorKind::ivon) ivon.validate();
    if (posterior == PosteriorKind::laplace && !(laplace_prior > 0.0))
      throw DomainError("Laplace prior precision must be positive");
    LossWeights{lambda_e, lambda_f}.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

inline void write_training_log(std::ostream& os, const TrainLog& log) {
  os << "epoch,train_loss,val_loss,lr\n";
  char buf[160];
  for (const auto& e : log.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.lr);
    os << buf;
  }
}

// One trained model or approximate posterior, whichever the config asked for.
struct Posterior {
  PosteriorKind kind = PosteriorKind::none;
  std::vector<double> theta;  // point estimate (EMA shadow when enabled)
  EnsembleState ensemble;
  SwagState swag{0, 20};
  IvonState ivon;
  LaplaceState laplace;
  int samples = 8;
};

struct TrainResult {
  Posterior posterior;
  std::vector<TrainLog> logs;  // one per trained member
};

inline std::uint64_t derive_seed(std::uint64_t master, const std::string& name) {
  Rng r = Rng::stream(master, name);
  return (r.below(1ull << 32) << 32) | r.below(1ull << 32);
}

namespace detail {

// batch-mean loss and flattened gradient at the model's current parameters
inline double batch_loss_grad(RaceModel& model, const Dataset& ds,
                              const std::vector<std::size_t>& batch, LossKind kind, LossWeights w,
                              std::vector<double>* grad_out) {
  const bool need_forces = w.lambda_f > 0.0;
  double total = 0.0;
  if (grad_out) std::fill(grad_out->begin(), grad_out->end(), 0.0);
  for (const std::size_t idx : batch) {
    Tape t;
    const ForwardResult f = model.forward(t, ds.frames[idx], nullptr, need_forces);
    const Value loss = structure_loss(t, terms_from(f), ds.frames[idx], kind, w);
    total += loss.item();
    if (!grad_out) continue;
    const std::vector<Value> grads = t.grad(loss, f.params);
    std::size_t at = 0;
    for (const auto& g : grads) {
      const auto& data = g.data();
      for (const double v : data) (*grad_out)[at++] += v;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (grad_out)
    for (auto& v : *grad_out) v *= inv;
  return total * inv;
}

inline double dataset_loss(RaceModel& model, const Dataset& ds, LossKind kind, LossWeights w) {
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return batch_loss_grad(model, ds, all, kind, w, nullptr);
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(order[i], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(at), order.begin() + static_cast<long>(end));
  }
  return batches;
}

struct SingleRun {
  std::vector<double> theta_ema;
  std::vector<double> theta_raw;
  TrainLog log;
};

// the shared AMSGrad loop; optionally feeds a SWAG collector
inline SingleRun train_single(RaceModel& model, const Dataset& train_ds, const Dataset& val_ds,
                              const TrainConfig& cfg, std::uint64_t seed, const std::string& prefix,
                              SwagState* collector) {
  const LossWeights w{cfg.lambda_e, cfg.lambda_f};
  model.init_params(derive_seed(seed, prefix + "init"));
  std::vector<double> theta = model.params().flatten();

  SingleRun run;
  if (cfg.epochs == 0) {
    run.theta_ema = theta;
    run.theta_raw = theta;
    return run;
  }
  if (train_ds.frames.empty()) throw NoData("empty training set");

  AmsgradState opt(theta.size());
  EmaState ema(cfg.ema_decay, theta);
  PlateauScheduler sched(cfg.max_lr);
  sched.factor = cfg.plateau_factor;
  sched.patience = cfg.plateau_patience;
  sched.rel_threshold = cfg.plateau_threshold;
  std::vector<double> grad(theta.size());

  const int swag_from = static_cast<int>(cfg.swag_start_fraction * cfg.epochs);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle = Rng::stream(seed, prefix + "batch" + std::to_string(epoch));
    const auto batches = make_batches(train_ds.size(), cfg.batch_size, shuffle);
    const double lr_used = sched.lr;
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      const double bl = batch_loss_grad(model, train_ds, batch, cfg.loss, w, &grad);
      if (!std::isfinite(bl))
        throw DivergedTraining("loss diverged at epoch " + std::to_string(epoch));
      opt.step(theta, grad, sched.lr);
      model.params().unflatten(theta);
      ema.update(theta);
      epoch_loss += bl * static_cast<double>(batch.size());
      seen += batch.size();
    }
    epoch_loss /= static_cast<double>(seen);

    const double val_loss =
        val_ds.frames.empty() ? epoch_loss : dataset_loss(model, val_ds, cfg.loss, w);
    if (!std::isfinite(val_loss))
      throw DivergedTraining("validation loss diverged at epoch " + std::to_string(epoch));
    sched.observe(val_loss);
    run.log.epochs.push_back({epoch, epoch_loss, val_loss, lr_used});

    if (collector && epoch >= swag_from) {
      if (collector->mean.size() != theta.size()) *collector = SwagState(theta.size(), collector->max_rank);
      swag_collect(*collector, theta);
    }
  }
  run.theta_raw = theta;
  run.theta_ema = ema.shadow;
  model.params().unflatten(run.theta_ema);
  return run;
}

inline SingleRun train_ivon(RaceModel& model, const Dataset& train_ds, const Dataset& val_ds,
                            const TrainConfig& cfg, std::uint64_t seed, IvonState* out) {
  const LossWeights w{cfg.lambda_e, cfg.lambda_f};
  model.init_params(derive_seed(seed, "init"));
  std::vector<double> theta0 = model.params().flatten();
  IvonHyper hy = cfg.ivon;
  hy.lr = cfg.max_lr;
  hy.ess = std::max(1.0, static_cast<double>(train_ds.size()));
  IvonState st = IvonState::init(theta0, cfg.ivon_h0, hy);

  SingleRun run;
  run.theta_raw = theta0;
  run.theta_ema = theta0;
  if (cfg.epochs == 0) {
    *out = st;
    return run;
  }
  if (train_ds.frames.empty()) throw NoData("empty training set");

  PlateauScheduler sched(cfg.max_lr);
  sched.factor = cfg.plateau_factor;
  sched.patience = cfg.plateau_patience;
  sched.rel_threshold = cfg.plateau_threshold;
  std::vector<double> grad(theta0.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle = Rng::stream(seed, "batch" + std::to_string(epoch));
    const auto batches = make_batches(train_ds.size(), cfg.batch_size, shuffle);
    Rng noise = Rng::stream(seed, "ivon" + std::to_string(epoch));
    const double lr_used = sched.lr;
    st.hyper.lr = sched.lr;
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      const std::vector<double> th = ivon_sample(st, noise);
      model.params().unflatten(th);
      const double bl = batch_loss_grad(model, train_ds, batch, cfg.loss, w, &grad);
      if (!std::isfinite(bl))
        throw DivergedTraining("loss diverged at epoch " + std::to_string(epoch));
      ivon_step_at(st, th, grad);
      epoch_loss += bl * static_cast<double>(batch.size());
      seen += batch.size();
    }
    epoch_loss /= static_cast<double>(seen);

    model.params().unflatten(st.m);
    const double val_loss =
        val_ds.frames.empty() ? epoch_loss : dataset_loss(model, val_ds, cfg.loss, w);
    if (!std::isfinite(val_loss))
      throw DivergedTraining("validation loss diverged at epoch " + std::to_string(epoch));
    sched.observe(val_loss);
    run.log.epochs.push_back({epoch, epoch_loss, val_loss, lr_used});
  }
  run.theta_raw = st.m;
  run.theta_ema = st.m;  // the variational mean is its own estimate, no EMA
  model.params().unflatten(st.m);
  *out = st;
  return run;
}

}  // namespace detail

inline TrainResult train(const ModelConfig& mcfg, const Dataset& train_ds, const Dataset& val_ds,
                         const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.loss != LossKind::mse && mcfg.head_mode == HeadMode::base)
    throw DomainError("NLL losses need a variance head");
  if (cfg.loss == LossKind::nll_jef && cfg.lambda_f > 0.0 && mcfg.head_mode != HeadMode::mve8)
    throw DomainError("the joint force NLL needs the covariance head");
  TrainResult out;
  out.posterior.kind = cfg.posterior;
  out.posterior.samples = cfg.posterior_samples;

  switch (cfg.posterior) {
    case PosteriorKind::none: {
      RaceModel model(mcfg);
      auto run = detail::train_single(model, train_ds, val_ds, cfg, seed, "", nullptr);
      out.posterior.theta = run.theta_ema;
      out.logs.push_back(std::move(run.log));
      break;
    }
    case PosteriorKind::ensemble: {
      for (int m = 0; m < cfg.ensemble_members; ++m) {
        RaceModel model(mcfg);
        const std::string prefix = "member" + std::to_string(m) + ".";
        auto run = detail::train_single(model, train_ds, val_ds, cfg, seed, prefix, nullptr);
        out.posterior.ensemble.members.push_back(run.theta_ema);
        if (m == 0) out.posterior.theta = run.theta_ema;
        out.logs.push_back(std::move(run.log));
      }
      break;
    }
    case PosteriorKind::swag: {
      RaceModel model(mcfg);
      SwagState collector(0, cfg.swag_rank);
      auto run = detail::train_single(model, train_ds, val_ds, cfg, seed, "", &collector);
      out.posterior.swag = std::move(collector);
      out.posterior.theta = run.theta_ema;
      out.logs.push_back(std::move(run.log));
      break;
    }
    case PosteriorKind::ivon: {
      RaceModel model(mcfg);
      auto run = detail::train_ivon(model, train_ds, val_ds, cfg, seed, &out.posterior.ivon);
      out.posterior.theta = run.theta_ema;
      out.logs.push_back(std::move(run.log));
      break;
    }
    case PosteriorKind::laplace: {
      RaceModel model(mcfg);
      auto run = detail::train_single(model, train_ds, val_ds, cfg, seed, "", nullptr);
      model.params().unflatten(run.theta_ema);
      out.posterior.laplace = laplace_fit(model, train_ds.frames, cfg.laplace_prior);
      out.posterior.theta = run.theta_ema;
      out.logs.push_back(std::move(run.log));
      break;
    }
  }
  return out;
}

// ---- run configuration ----

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["max_lr"] = cfg.max_lr;
  j["plateau_factor"] = cfg.plateau_factor;
  j["plateau_patience"] = cfg.plateau_patience;
  j["plateau_threshold"] = cfg.plateau_threshold;
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["ema_decay"] = cfg.ema_decay;
  j["loss"] = to_string(cfg.loss);
  j["lambda_e"] = cfg.lambda_e;
  j["lambda_f"] = cfg.lambda_f;
  j["posterior"] = to_string(cfg.posterior);
  j["ensemble_members"] = cfg.ensemble_members;
  j["swag_rank"] = cfg.swag_rank;
  j["swag_start_fraction"] = cfg.swag_start_fraction;
  j["ivon"] = {{"lr", cfg.ivon.lr},
               {"beta1", cfg.ivon.beta1},
               {"rho", cfg.ivon.rho},
               {"delta", cfg.ivon.delta},
               {"ess", cfg.ivon.ess}};
  j["ivon_h0"] = cfg.ivon_h0;
  j["laplace_prior"] = cfg.laplace_prior;
  j["posterior_samples"] = cfg.posterior_samples;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"max_lr", "plateau_factor", "plateau_patience", "plateau_threshold",
                       "batch_size", "epochs", "ema_decay", "loss", "lambda_e", "lambda_f",
                       "posterior", "ensemble_members", "swag_rank", "swag_start_fraction", "ivon",
                       "ivon_h0", "laplace_prior", "posterior_samples"},
                      "train config");
  TrainConfig cfg;
  if (j.contains("max_lr")) cfg.max_lr = j["max_lr"].get<double>();
  if (j.contains("plateau_factor")) cfg.plateau_factor = j["plateau_factor"].get<double>();
  if (j.contains("plateau_patience")) cfg.plateau_patience = j["plateau_patience"].get<int>();
  if (j.contains("plateau_threshold")) cfg.plateau_threshold = j["plateau_threshold"].get<double>();
  if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
  if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
  if (j.contains("ema_decay")) cfg.ema_decay = j["ema_decay"].get<double>();
  if (j.contains("loss")) cfg.loss = loss_kind_from_string(j["loss"].get<std::string>());
  if (j.contains("lambda_e")) cfg.lambda_e = j["lambda_e"].get<double>();
  if (j.contains("lambda_f")) cfg.lambda_f = j["lambda_f"].get<double>();
  if (j.contains("posterior")) cfg.posterior = posterior_kind_from_string(j["posterior"].get<std::string>());
  if (j.contains("ensemble_members")) cfg.ensemble_members = j["ensemble_members"].get<int>();
  if (j.contains("swag_rank")) cfg.swag_rank = j["swag_rank"].get<int>();
  if (j.contains("swag_start_fraction")) cfg.swag_start_fraction = j["swag_start_fraction"].get<double>();
  if (j.contains("ivon")) {
    const auto& iv = j["ivon"];
    reject_unknown_keys(iv, {"lr", "beta1", "rho", "delta", "ess"}, "ivon config");
    if (iv.contains("lr")) cfg.ivon.lr = iv["lr"].get<double>();
    if (iv.contains("beta1")) cfg.ivon.beta1 = iv["beta1"].get<double>();
    if (iv.contains("rho")) cfg.ivon.rho = iv["rho"].get<double>();
    if (iv.contains("delta")) cfg.ivon.delta = iv["delta"].get<double>();
    if (iv.contains("ess")) cfg.ivon.ess = iv["ess"].get<double>();
  }
  if (j.contains("ivon_h0")) cfg.ivon_h0 = j["ivon_h0"].get<double>();
  if (j.contains("laplace_prior")) cfg.laplace_prior = j["laplace_prior"].get<double>();
  if (j.contains("posterior_samples")) cfg.posterior_samples = j["posterior_samples"].get<int>();
  return cfg;
}

// one JSON document drives a whole run: model, optimization, seed
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"model", "train", "seed"}, "run config");
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
  if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
  if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
  return rc;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = model_config_to_json(rc.model);
  j["train"] = train_config_to_json(rc.train);
  j["seed"] = rc.seed;
  return j;
}

// ---- posterior <-> checkpoint ----

inline Checkpoint pack_posterior(const ModelConfig& mcfg, const Posterior& post) {
  switch (post.kind) {
    case PosteriorKind::none: return pack_params(mcfg, post.theta);
    case PosteriorKind::ensemble: return pack_ensemble(mcfg, post.ensemble);
    case PosteriorKind::swag: return pack_swag(mcfg, post.swag);
    case PosteriorKind::ivon: return pack_ivon(mcfg, post.ivon);
    case PosteriorKind::laplace: return pack_laplace(mcfg, post.laplace);
  }
  throw DomainError("unknown posterior kind");
}

inline Posterior posterior_from_checkpoint(const Checkpoint& ck, int samples = 8) {
  if (!ck.meta.contains("posterior")) throw IncompatibleCheckpoint("checkpoint lacks a posterior tag");
  const std::string kind = ck.meta["posterior"].get<std::string>();
  Posterior post;
  post.samples = samples;
  if (kind == "none") {
    post.kind = PosteriorKind::none;
    post.theta = ck.require("theta").data;
  } else if (kind == "ensemble") {
    post.kind = PosteriorKind::ensemble;
    post.ensemble = unpack_ensemble(ck);
  } else if (kind == "swag") {
    post.kind = PosteriorKind::swag;
    post.swag = unpack_swag(ck);
  } else if (kind == "ivon") {
    post.kind = PosteriorKind::ivon;
    post.ivon = unpack_ivon(ck);
  } else if (kind == "laplace") {
    post.kind = PosteriorKind::laplace;
    post.laplace = unpack_laplace(ck);
  } else {
    throw IncompatibleCheckpoint("unknown posterior kind '" + kind + "'");
  }
  return post;
}

// mean prediction under any trained artifact; sampling posteriors draw
// `posterior.samples` parameter vectors from the given stream
inline PredictiveDistribution posterior_mean_prediction(RaceModel& model, const Posterior& post,
                                                        const AtomicStructure& s, Rng& rng) {
  switch (post.kind) {
    case PosteriorKind::none: {
      model.params().unflatten(post.theta);
      return model.predict(s);
    }
    case PosteriorKind::ensemble:
      return posterior_predict(model, post.ensemble, s).mean;
    case PosteriorKind::swag:
      return posterior_predict(model, post.swag, s, post.samples, rng).mean;
    case PosteriorKind::ivon:
      return posterior_predict(model, post.ivon, s, post.samples, rng).mean;
    case PosteriorKind::laplace:
      return posterior_predict(model, post.laplace, s, post.samples, rng).mean;
  }
  throw DomainError("unknown posterior kind");
}

// ---- evaluation ----

struct EvalReport {
  double e_rmse = 0.0, e_mae = 0.0;
  double f_rmse = 0.0, f_mae = 0.0;
  std::size_t n_structures = 0;
  std::size_t n_force_components = 0;
  bool has_energy_labels = false, has_force_labels = false;
  bool has_energy_sd = false, has_force_sd = false;
  std::vector<double> e_resid, e_sd;      // per structure
  std::vector<double> f_resid, f_sd;      // per force component
  std::vector<double> ood_score;          // predicted energy sd per structure
};

template <class Predictor>
EvalReport evaluate_with(Predictor&& predict, const Dataset& ds) {
  if (ds.frames.empty()) throw NoData("empty evaluation set");
  EvalReport rep;
  double se_e = 0.0, ae_e = 0.0, se_f = 0.0, ae_f = 0.0;
  for (const auto& s : ds.frames) {
    const PredictiveDistribution p = predict(s);
    ++rep.n_structures;
    if (p.has_energy_var) {
      rep.has_energy_sd = true;
      rep.ood_score.push_back(std::sqrt(p.energy_var));
    }
    if (s.has_energy) {
      rep.has_energy_labels = true;
      const double r = p.energy_mean - s.energy;
      se_e += r * r;
      ae_e += std::abs(r);
      rep.e_resid.push_back(r);
      if (p.has_energy_var) rep.e_sd.push_back(std::sqrt(p.energy_var));
    }
    if (s.has_forces()) {
      rep.has_force_labels = true;
      if (p.force_mean.size() != s.forces.size()) throw ShapeError("force prediction shape mismatch");
      for (std::size_t i = 0; i < s.forces.size(); ++i) {
        const double r = p.force_mean[i] - s.forces[i];
        se_f += r * r;
        ae_f += std::abs(r);
        rep.f_resid.push_back(r);
        ++rep.n_force_components;
        if (p.has_force_cov) {
          const std::size_t atom = i / 3, comp = i % 3;
          rep.f_sd.push_back(std::sqrt(p.force_cov[9 * atom + 4 * comp]));
          rep.has_force_sd = true;
        }
      }
    }
  }
  if (!rep.e_resid.empty()) {
    se_e /= static_cast<double>(rep.e_resid.size());
    rep.e_rmse = std::sqrt(se_e);
    rep.e_mae = ae_e / static_cast<double>(rep.e_resid.size());
  }
  if (rep.n_force_components > 0) {
    se_f /= static_cast<double>(rep.n_force_components);
    rep.f_rmse = std::sqrt(se_f);
    rep.f_mae = ae_f / static_cast<double>(rep.n_force_components);
  }
  return rep;
}

inline EvalReport evaluate_params(RaceModel& model, const std::vector<double>& theta,
                                  const Dataset& ds) {
  model.params().unflatten(theta);
  return evaluate_with([&model](const AtomicStructure& s) { return model.predict(s); }, ds);
}

inline EvalReport evaluate_posterior(RaceModel& model, const Posterior& post, const Dataset& ds,
                                     std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "eval");
  return evaluate_with(
      [&](const AtomicStructure& s) { return posterior_mean_prediction(model, post, s, rng); }, ds);
}

// ---- active-learning round ----

struct AlRoundResult {
  std::vector<AcquisitionRecord> selected;
  TrainResult retrained;
  EvalReport metrics;
  bool retrained_valid = false;
};

// Scores every pool structure with the current ensemble, one record per
// frame indexed by pool position.  Random selection skips the model pass.
inline std::vector<AcquisitionRecord> score_pool(RaceModel& model, const EnsembleState& ens,
                                                 const Dataset& pool, ForceAggregate agg) {
  ens.validate();
  const std::vector<double> saved = model.params().flatten();
  std::vector<AcquisitionRecord> records;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::vector<PredictiveDistribution> members;
    for (const auto& theta : ens.members) {
      model.params().unflatten(theta);
      members.push_back(model.predict(pool.frames[i]));
    }
    records.push_back(score_structure(static_cast<std::int64_t>(i), members, agg));
  }
  model.params().unflatten(saved);
  return records;
}

// One acquisition round: score, select, move the picks from pool to train,
// retrain the ensemble from scratch on the grown set, evaluate on test.
// A zero budget changes nothing and reports the current posterior's metrics.
inline AlRoundResult al_round(RaceModel& model, const Posterior& current, Dataset& train_ds,
                              Dataset& pool, const Dataset& val_ds, const Dataset& test_ds,
                              const ModelConfig& mcfg, const TrainConfig& cfg, std::size_t budget,
                              Strategy strategy, std::uint64_t seed) {
  if (current.kind != PosteriorKind::ensemble)
    throw DomainError("acquisition scoring needs an ensemble posterior");
  if (budget > pool.size()) throw BudgetTooLarge("budget exceeds pool size");

  AlRoundResult out;
  if (budget == 0) {
    out.metrics = evaluate_posterior(model, current, test_ds, derive_seed(seed, "al_eval"));
    return out;
  }

  std::vector<AcquisitionRecord> records;
  if (strategy == Strategy::Random) {
    records.resize(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i)
      records[i].structure_id = static_cast<std::int64_t>(i);
  } else {
    records = score_pool(model, current.ensemble, pool, ForceAggregate::max);
  }
  out.selected = select(records, strategy, budget, derive_seed(seed, "selection"));

  std::vector<std::size_t> picked;
  for (const auto& r : out.selected) picked.push_back(static_cast<std::size_t>(r.structure_id));
  std::sort(picked.begin(), picked.end());
  for (const std::size_t idx : picked) train_ds.frames.push_back(pool.frames[idx]);
  for (auto it = picked.rbegin(); it != picked.rend(); ++it)
    pool.frames.erase(pool.frames.begin() + static_cast<long>(*it));

  out.retrained = train(mcfg, train_ds, val_ds, cfg, derive_seed(seed, "retrain"));
  out.retrained_valid = true;
  out.metrics = evaluate_posterior(model, out.retrained.posterior, test_ds, derive_seed(seed, "al_eval"));
  return out;
}

}  // namespace bam
