// bam: batch workflows for uncertainty-aware interatomic potentials.
// One subcommand per workflow stage; stages compose through files.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <bam/bald.hpp>
#include <bam/train.hpp>
#include <bam/uq.hpp>

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace {

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool has_config = false;
  bool has_seed = false;
  std::string energy_key = "energy";
  std::string forces_key = "forces";
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "run configuration JSON")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "master seed (overrides config)");
}

void add_data_keys(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--energy-key", o.energy_key, "comment-line key holding the frame energy");
  cmd->add_option("--forces-key", o.forces_key, "property column holding forces");
}

bam::RunConfig load_run_config(const CLI::App* cmd, const CommonOpts& o) {
  bam::RunConfig rc;
  if (cmd->count("--config") > 0) {
    std::ifstream in(o.config_path);
    if (!in) throw bam::ParseError("cannot open " + o.config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw bam::ParseError(o.config_path + ": " + e.what());
    }
    rc = bam::run_config_from_json(j);
  }
  if (cmd->count("--seed") > 0) rc.seed = o.seed;
  return rc;
}

bam::Dataset load_data(const std::string& path, const CommonOpts& o) {
  bam::ExtxyzOptions opt;
  opt.energy_key = o.energy_key;
  opt.forces_key = o.forces_key;
  return bam::read_extxyz(path, opt);
}

void write_frames(const std::string& path, const bam::Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw bam::ParseError("cannot open " + path + " for writing");
  bam::write_extxyz_stream(os, ds);
}

// one JSON object per metric, newline delimited
struct MetricSink {
  std::ofstream file;
  std::ostream* os = &std::cout;
  explicit MetricSink(const std::string& path) {
    if (!path.empty()) {
      file.open(path, std::ios::binary);
      if (!file) throw bam::ParseError("cannot open " + path + " for writing");
      os = &file;
    }
  }
  void emit(const std::string& name, double value, std::size_t count) {
    nlohmann::json j;
    j["name"] = name;
    j["value"] = value;
    j["count"] = count;
    *os << j.dump() << "\n";
  }
};

void progress(const std::string& line) { std::cerr << "[bam] " << line << "\n"; }

void write_logs(const std::string& path, const std::vector<bam::TrainLog>& logs) {
  if (path.empty()) return;
  auto open = [](const std::string& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw bam::ParseError("cannot open " + p + " for writing");
    return os;
  };
  if (logs.size() == 1) {
    auto os = open(path);
    bam::write_training_log(os, logs[0]);
    return;
  }
  const std::size_t dot = path.rfind('.');
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const std::string tag = ".member" + std::to_string(i);
    const std::string p = (dot == std::string::npos || dot == 0)
                              ? path + tag
                              : path.substr(0, dot) + tag + path.substr(dot);
    auto os = open(p);
    bam::write_training_log(os, logs[i]);
  }
}

struct TrainOpts {
  CommonOpts common;
  std::string data, val, out, log;
  int members = 0;
  int jobs = 1;
  int rank = 0;
  double start_fraction = -1.0;
  double prior = -1.0;
};

// Trains ensemble members concurrently; member m is bitwise identical to the
// sequential run because each one only touches its own model and seed streams.
bam::TrainResult train_ensemble_jobs(const bam::ModelConfig& mcfg, const bam::Dataset& train_ds,
                                     const bam::Dataset& val_ds, const bam::TrainConfig& cfg,
                                     std::uint64_t seed, int jobs) {
  const int n = cfg.ensemble_members;
  std::vector<bam::detail::SingleRun> runs(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  const int width = std::min(jobs, n);
  for (int w = 0; w < width; ++w) {
    pool.emplace_back([&, w]() {
      for (int m = w; m < n; m += width) {
        try {
          bam::RaceModel model(mcfg);
          const std::string prefix = "member" + std::to_string(m) + ".";
          runs[static_cast<std::size_t>(m)] =
              bam::detail::train_single(model, train_ds, val_ds, cfg, seed, prefix, nullptr);
        } catch (...) {
          errors[static_cast<std::size_t>(m)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  bam::TrainResult out;
  out.posterior.kind = bam::PosteriorKind::ensemble;
  out.posterior.samples = cfg.posterior_samples;
  for (int m = 0; m < n; ++m) {
    out.posterior.ensemble.members.push_back(runs[static_cast<std::size_t>(m)].theta_ema);
    if (m == 0) out.posterior.theta = runs[0].theta_ema;
    out.logs.push_back(std::move(runs[static_cast<std::size_t>(m)].log));
  }
  return out;
}

int cmd_train(const CLI::App* cmd, const TrainOpts& o, bam::PosteriorKind kind) {
  bam::RunConfig rc = load_run_config(cmd, o.common);
  rc.train.posterior = kind;
  auto given = [cmd](const char* name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  if (given("--members")) rc.train.ensemble_members = o.members;
  if (given("--rank")) rc.train.swag_rank = o.rank;
  if (given("--start-fraction")) rc.train.swag_start_fraction = o.start_fraction;
  if (given("--prior")) rc.train.laplace_prior = o.prior;

  const bam::Dataset train_ds = load_data(o.data, o.common);
  const bam::Dataset val_ds = o.val.empty() ? train_ds : load_data(o.val, o.common);
  progress("training (" + std::string(bam::to_string(kind)) + ") on " +
           std::to_string(train_ds.size()) + " frames, " + std::to_string(rc.train.epochs) +
           " epochs");

  bam::TrainResult res;
  if (kind == bam::PosteriorKind::ensemble && o.jobs > 1) {
    rc.train.validate();
    res = train_ensemble_jobs(rc.model, train_ds, val_ds, rc.train, rc.seed, o.jobs);
  } else {
    res = bam::train(rc.model, train_ds, val_ds, rc.train, rc.seed);
  }

  bam::save_checkpoint(o.out, bam::pack_posterior(rc.model, res.posterior));
  write_logs(o.log, res.logs);
  progress("wrote " + o.out);
  return 0;
}

struct CkptOpts {
  CommonOpts common;
  std::string checkpoint, data, out;
  int samples = 0;
};

bam::Posterior load_posterior(const CLI::App* cmd, const CkptOpts& o, const bam::RunConfig& rc,
                              bam::ModelConfig& mcfg_out) {
  const bam::Checkpoint ck = bam::load_checkpoint(o.checkpoint);
  mcfg_out = bam::checkpoint_model_config(ck);
  int samples = rc.train.posterior_samples;
  if (cmd->count("--samples") > 0) samples = o.samples;
  return bam::posterior_from_checkpoint(ck, samples);
}

int cmd_laplace_fit(const CLI::App* cmd, const CkptOpts& o, double prior, bool has_prior) {
  bam::RunConfig rc = load_run_config(cmd, o.common);
  if (has_prior) rc.train.laplace_prior = prior;
  const bam::Checkpoint ck = bam::load_checkpoint(o.checkpoint);
  const bam::ModelConfig mcfg = bam::checkpoint_model_config(ck);
  bam::Posterior base = bam::posterior_from_checkpoint(ck);
  if (base.kind != bam::PosteriorKind::none)
    throw bam::DomainError("laplace-fit needs a point-estimate checkpoint");
  const bam::Dataset ds = load_data(o.data, o.common);
  progress("fitting curvature on " + std::to_string(ds.size()) + " frames");
  bam::RaceModel model(mcfg);
  model.params().unflatten(base.theta);
  const bam::LaplaceState st = bam::laplace_fit(model, ds.frames, rc.train.laplace_prior);
  bam::save_checkpoint(o.out, bam::pack_laplace(mcfg, st));
  progress("wrote " + o.out);
  return 0;
}

int cmd_predict(const CLI::App* cmd, const CkptOpts& o) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  bam::ModelConfig mcfg;
  const bam::Posterior post = load_posterior(cmd, o, rc, mcfg);
  bam::Dataset ds = load_data(o.data, o.common);
  bam::RaceModel model(mcfg);
  bam::Rng rng = bam::Rng::stream(rc.seed, "eval");
  for (auto& s : ds.frames) {
    const bam::PredictiveDistribution p = bam::posterior_mean_prediction(model, post, s, rng);
    s.has_energy = true;
    s.energy = p.energy_mean;
    s.forces = p.force_mean;
  }
  write_frames(o.out, ds);
  progress("wrote predictions for " + std::to_string(ds.size()) + " frames to " + o.out);
  return 0;
}

void append_eval_metrics(MetricSink& sink, const bam::EvalReport& rep) {
  if (rep.has_energy_labels) {
    sink.emit("e_rmse", rep.e_rmse, rep.n_structures);
    sink.emit("e_mae", rep.e_mae, rep.n_structures);
  }
  if (rep.has_force_labels) {
    sink.emit("f_rmse", rep.f_rmse, rep.n_force_components);
    sink.emit("f_mae", rep.f_mae, rep.n_force_components);
  }
  if (rep.has_energy_labels && rep.has_energy_sd && rep.e_resid.size() == rep.e_sd.size())
    sink.emit("e_ce", bam::calibration_error(rep.e_resid, rep.e_sd), rep.e_resid.size());
  if (rep.has_force_labels && rep.has_force_sd && rep.f_resid.size() == rep.f_sd.size())
    sink.emit("f_ce", bam::calibration_error(rep.f_resid, rep.f_sd), rep.f_resid.size());
}

int cmd_evaluate(const CLI::App* cmd, const CkptOpts& o, const std::string& ood_data,
                 const std::string& reliability_out, const std::string& scatter_out) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  bam::ModelConfig mcfg;
  const bam::Posterior post = load_posterior(cmd, o, rc, mcfg);
  const bam::Dataset ds = load_data(o.data, o.common);
  bam::RaceModel model(mcfg);
  progress("evaluating " + std::to_string(ds.size()) + " frames");
  const bam::EvalReport rep = bam::evaluate_posterior(model, post, ds, rc.seed);

  MetricSink sink(o.out);
  append_eval_metrics(sink, rep);

  if (!ood_data.empty()) {
    const bam::Dataset ood = load_data(ood_data, o.common);
    const bam::EvalReport orep = bam::evaluate_posterior(model, post, ood, rc.seed);
    if (rep.ood_score.empty() || orep.ood_score.empty())
      throw bam::DomainError("AUROC needs predicted energy variance on both sets");
    sink.emit("auroc", bam::auroc(rep.ood_score, orep.ood_score),
              rep.ood_score.size() + orep.ood_score.size());
  }

  if (!reliability_out.empty()) {
    if (!rep.has_energy_sd || !rep.has_energy_labels)
      throw bam::DomainError("reliability curve needs energy labels and predicted variance");
    const bam::ReliabilityCurve curve = bam::reliability_curve(rep.e_resid, rep.e_sd);
    std::ofstream os(reliability_out, std::ios::binary);
    if (!os) throw bam::ParseError("cannot open " + reliability_out + " for writing");
    os << "level,observed\n";
    char buf[80];
    for (std::size_t j = 0; j < curve.levels.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", curve.levels[j], curve.observed[j]);
      os << buf;
    }
  }

  if (!scatter_out.empty()) {
    if (!rep.has_energy_sd || !rep.has_energy_labels)
      throw bam::DomainError("error scatter needs energy labels and predicted variance");
    const bam::ScatterData sc = bam::error_scatter(rep.e_resid, rep.e_sd);
    std::ofstream os(scatter_out, std::ios::binary);
    if (!os) throw bam::ParseError("cannot open " + scatter_out + " for writing");
    os << "sd,abs_error\n";
    char buf[80];
    for (std::size_t i = 0; i < sc.predicted_sd.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", sc.predicted_sd[i], sc.abs_error[i]);
      os << buf;
    }
  }
  return 0;
}

int cmd_ood_score(const CLI::App* cmd, const CkptOpts& o) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  bam::ModelConfig mcfg;
  const bam::Posterior post = load_posterior(cmd, o, rc, mcfg);
  const bam::Dataset ds = load_data(o.data, o.common);
  bam::RaceModel model(mcfg);
  const bam::EvalReport rep = bam::evaluate_posterior(model, post, ds, rc.seed);
  if (rep.ood_score.size() != ds.size())
    throw bam::DomainError("checkpoint provides no energy variance");

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!o.out.empty()) {
    file.open(o.out, std::ios::binary);
    if (!file) throw bam::ParseError("cannot open " + o.out + " for writing");
    os = &file;
  }
  *os << "id,score\n";
  char buf[64];
  for (std::size_t i = 0; i < rep.ood_score.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, rep.ood_score[i]);
    *os << buf;
  }
  return 0;
}

struct Channel {
  std::vector<double> resid, sd;
};

Channel pick_channel(const bam::EvalReport& rep, const std::string& channel) {
  if (channel == "energy") {
    if (!rep.has_energy_labels || !rep.has_energy_sd)
      throw bam::DomainError("energy channel needs labels and predicted variance");
    return {rep.e_resid, rep.e_sd};
  }
  if (channel == "force") {
    if (!rep.has_force_labels || !rep.has_force_sd)
      throw bam::DomainError("force channel needs labels and predicted covariance");
    return {rep.f_resid, rep.f_sd};
  }
  throw bam::DomainError("unknown channel '" + channel + "'");
}

bam::CalibrationMap load_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw bam::ParseError("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw bam::ParseError(path + ": " + e.what());
  }
  bam::reject_unknown_keys(j, {"channel", "nominal", "calibrated"}, "calibration map");
  bam::CalibrationMap map;
  map.nominal = j.at("nominal").get<std::vector<double>>();
  map.calibrated = j.at("calibrated").get<std::vector<double>>();
  return map;
}

int cmd_calibrate(const CLI::App* cmd, const CkptOpts& o, const std::string& channel,
                  const std::string& map_path, const std::string& curve_out) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  bam::ModelConfig mcfg;
  const bam::Posterior post = load_posterior(cmd, o, rc, mcfg);
  const bam::Dataset ds = load_data(o.data, o.common);
  bam::RaceModel model(mcfg);
  const bam::EvalReport rep = bam::evaluate_posterior(model, post, ds, rc.seed);
  const Channel ch = pick_channel(rep, channel);

  bam::CalibrationMap map = bam::CalibrationMap::identity();
  const bam::CalibrationMap* map_ptr = nullptr;
  if (!map_path.empty()) {
    map = load_map(map_path);
    map_ptr = &map;
  }
  const bam::ReliabilityCurve curve = bam::reliability_curve(ch.resid, ch.sd, 100, map_ptr);

  if (!curve_out.empty()) {
    std::ofstream os(curve_out, std::ios::binary);
    if (!os) throw bam::ParseError("cannot open " + curve_out + " for writing");
    os << "level,observed\n";
    char buf[80];
    for (std::size_t j = 0; j < curve.levels.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", curve.levels[j], curve.observed[j]);
      os << buf;
    }
  }

  double ce = 0.0;
  for (std::size_t j = 0; j < curve.levels.size(); ++j) {
    const double d = curve.levels[j] - curve.observed[j];
    ce += d * d;
  }
  ce /= static_cast<double>(curve.levels.size());

  MetricSink sink(o.out);
  sink.emit(channel == "energy" ? "e_ce" : "f_ce", ce, ch.resid.size());
  return 0;
}

int cmd_recalibrate(const CLI::App* cmd, const CkptOpts& o, const std::string& channel) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  bam::ModelConfig mcfg;
  const bam::Posterior post = load_posterior(cmd, o, rc, mcfg);
  const bam::Dataset ds = load_data(o.data, o.common);
  bam::RaceModel model(mcfg);
  const bam::EvalReport rep = bam::evaluate_posterior(model, post, ds, rc.seed);
  const Channel ch = pick_channel(rep, channel);

  const bam::CalibrationMap map = bam::recalibrate_fit(ch.resid, ch.sd);
  const double before = bam::calibration_error(ch.resid, ch.sd);
  const double after = bam::calibration_error(ch.resid, ch.sd, 100, &map);
  progress("ce " + std::to_string(before) + " -> " + std::to_string(after) + " on the fitting set");

  nlohmann::json j;
  j["channel"] = channel;
  j["nominal"] = map.nominal;
  j["calibrated"] = map.calibrated;
  std::ofstream os(o.out, std::ios::binary);
  if (!os) throw bam::ParseError("cannot open " + o.out + " for writing");
  os << j.dump(2) << "\n";
  return 0;
}

int cmd_al_select(const CLI::App* cmd, const CkptOpts& o, const std::string& pool_path,
                  const std::string& strategy_name, std::size_t budget,
                  const std::string& aggregate) {
  const bam::RunConfig rc = load_run_config(cmd, o.common);
  const bam::Strategy strategy = bam::strategy_from_string(strategy_name);
  const bam::Checkpoint ck = bam::load_checkpoint(o.checkpoint);
  const bam::ModelConfig mcfg = bam::checkpoint_model_config(ck);
  const bam::Posterior post = bam::posterior_from_checkpoint(ck);
  if (post.kind != bam::PosteriorKind::ensemble)
    throw bam::DomainError("acquisition scoring needs an ensemble posterior");
  const bam::Dataset pool = load_data(pool_path, o.common);
  if (budget > pool.size()) throw bam::BudgetTooLarge("budget exceeds pool size");

  bam::ForceAggregate agg = bam::ForceAggregate::max;
  if (aggregate == "mean")
    agg = bam::ForceAggregate::mean;
  else if (aggregate != "max")
    throw bam::DomainError("unknown aggregate '" + aggregate + "'");

  std::vector<bam::AcquisitionRecord> records;
  if (strategy == bam::Strategy::Random) {
    for (std::size_t i = 0; i < pool.size(); ++i)
      records.push_back({static_cast<std::int64_t>(i), 0.0, 0.0, bam::Strategy::Random});
  } else {
    progress("scoring " + std::to_string(pool.size()) + " pool frames");
    bam::RaceModel model(mcfg);
    records = bam::score_pool(model, post.ensemble, pool, agg);
  }
  const auto picked =
      bam::select(std::move(records), strategy, budget, bam::derive_seed(rc.seed, "selection"));

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!o.out.empty()) {
    file.open(o.out, std::ios::binary);
    if (!file) throw bam::ParseError("cannot open " + o.out + " for writing");
    os = &file;
  }
  bam::write_selection_manifest(*os, picked);
  return 0;
}

struct AlRoundOpts {
  CkptOpts ckpt;
  std::string train_path, pool_path, val_path, test_path;
  std::string strategy = "bald_ef";
  std::size_t budget = 0;
  std::string out_train, out_pool, out_ckpt, manifest, metrics_out;
};

int cmd_al_round(const CLI::App* cmd, const AlRoundOpts& o) {
  bam::RunConfig rc = load_run_config(cmd, o.ckpt.common);
  const bam::Checkpoint ck = bam::load_checkpoint(o.ckpt.checkpoint);
  const bam::ModelConfig mcfg = bam::checkpoint_model_config(ck);
  const bam::Posterior post = bam::posterior_from_checkpoint(ck);
  rc.train.posterior = bam::PosteriorKind::ensemble;
  rc.train.ensemble_members = static_cast<int>(post.ensemble.members.size());

  bam::Dataset train_ds = load_data(o.train_path, o.ckpt.common);
  bam::Dataset pool = load_data(o.pool_path, o.ckpt.common);
  const bam::Dataset val_ds = o.val_path.empty() ? train_ds : load_data(o.val_path, o.ckpt.common);
  const bam::Dataset test_ds = load_data(o.test_path, o.ckpt.common);

  progress("acquisition round: budget " + std::to_string(o.budget) + ", strategy " + o.strategy);
  bam::RaceModel model(mcfg);
  const bam::AlRoundResult res =
      bam::al_round(model, post, train_ds, pool, val_ds, test_ds, mcfg, rc.train, o.budget,
                    bam::strategy_from_string(o.strategy), rc.seed);

  if (!o.out_train.empty()) write_frames(o.out_train, train_ds);
  if (!o.out_pool.empty()) write_frames(o.out_pool, pool);
  if (!o.manifest.empty()) {
    std::ofstream os(o.manifest, std::ios::binary);
    if (!os) throw bam::ParseError("cannot open " + o.manifest + " for writing");
    bam::write_selection_manifest(os, res.selected);
  }
  if (!o.out_ckpt.empty()) {
    if (!res.retrained_valid) throw bam::DomainError("no retrained model to save at budget 0");
    bam::save_checkpoint(o.out_ckpt, bam::pack_posterior(mcfg, res.retrained.posterior));
  }
  MetricSink sink(o.metrics_out);
  append_eval_metrics(sink, res.metrics);
  return 0;
}

int cmd_score(const std::vector<std::string>& inputs, const std::string& out) {
  struct Row {
    std::string path;
    double e_rmse = -1, f_rmse = -1, e_ce = -1, f_ce = -1, auroc = -1;
  };
  std::vector<Row> rows;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw bam::ParseError("cannot open " + path);
    Row row;
    row.path = path;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw bam::ParseError(path + ": " + e.what());
      }
      const std::string name = j.at("name").get<std::string>();
      const double value = j.at("value").get<double>();
      if (name == "e_rmse") row.e_rmse = value;
      if (name == "f_rmse") row.f_rmse = value;
      if (name == "e_ce") row.e_ce = value;
      if (name == "f_ce") row.f_ce = value;
      if (name == "auroc") row.auroc = value;
    }
    for (double v : {row.e_rmse, row.f_rmse, row.e_ce, row.f_ce, row.auroc})
      if (v < 0) throw bam::DomainError(path + " lacks e_rmse/f_rmse/e_ce/f_ce/auroc records");
    rows.push_back(row);
  }
  if (rows.empty()) throw bam::NoData("no metric files given");

  bam::CohortNormalization ctx;
  ctx.e_ce_min = ctx.e_ce_max = rows[0].e_ce;
  ctx.f_ce_min = ctx.f_ce_max = rows[0].f_ce;
  for (const auto& r : rows) {
    ctx.e_ce_min = std::min(ctx.e_ce_min, r.e_ce);
    ctx.e_ce_max = std::max(ctx.e_ce_max, r.e_ce);
    ctx.f_ce_min = std::min(ctx.f_ce_min, r.f_ce);
    ctx.f_ce_max = std::max(ctx.f_ce_max, r.f_ce);
  }

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!out.empty()) {
    file.open(out, std::ios::binary);
    if (!file) throw bam::ParseError("cannot open " + out + " for writing");
    os = &file;
  }
  for (const auto& r : rows) {
    nlohmann::json j;
    j["name"] = "composite";
    j["input"] = r.path;
    j["value"] = bam::composite_score(r.e_rmse, r.f_rmse, r.e_ce, r.f_ce, r.auroc, ctx);
    *os << j.dump() << "\n";
  }
  return 0;
}

int cmd_inspect(const std::string& path) {
  const bam::Checkpoint ck = bam::load_checkpoint(path);
  nlohmann::json j;
  j["format_version"] = bam::kCheckpointVersion;
  j["meta"] = ck.meta;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& a : ck.arrays) {
    nlohmann::json e;
    e["name"] = a.name;
    e["shape"] = a.shape;
    e["count"] = a.data.size();
    arrays.push_back(e);
  }
  j["arrays"] = arrays;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uncertainty-aware interatomic potentials: train, evaluate, calibrate, select"};
  app.require_subcommand(1);
  int rc = 0;

  // train family
  TrainOpts tr[4];
  const char* train_names[4] = {"train", "ensemble-train", "swag-train", "ivon-train"};
  const char* train_help[4] = {"train a point-estimate model",
                               "train an ensemble of independently seeded models",
                               "train with stochastic weight averaging collection",
                               "train with the variational online Newton optimizer"};
  const bam::PosteriorKind train_kinds[4] = {bam::PosteriorKind::none, bam::PosteriorKind::ensemble,
                                             bam::PosteriorKind::swag, bam::PosteriorKind::ivon};
  for (int i = 0; i < 4; ++i) {
    CLI::App* c = app.add_subcommand(train_names[i], train_help[i]);
    TrainOpts& o = tr[i];
    add_common(c, o.common);
    add_data_keys(c, o.common);
    c->add_option("--data", o.data, "training frames (extended XYZ)")->required();
    c->add_option("--val", o.val, "validation frames; defaults to the training set");
    c->add_option("--out", o.out, "checkpoint to write")->required();
    c->add_option("--log", o.log, "training log CSV");
    if (i == 1) {
      c->add_option("--members", o.members, "ensemble size");
      c->add_option("--jobs", o.jobs, "concurrent member training jobs")
          ->check(CLI::PositiveNumber);
    }
    if (i == 2) {
      c->add_option("--rank", o.rank, "deviation buffer rank");
      c->add_option("--start-fraction", o.start_fraction, "snapshot collection start, 0..1");
    }
    const bam::PosteriorKind kind = train_kinds[i];
    c->callback([&rc, c, &o, kind]() { rc = cmd_train(c, o, kind); });
  }

  // laplace-fit
  CkptOpts lap;
  double lap_prior = 0.0;
  CLI::App* c_lap = app.add_subcommand("laplace-fit", "fit a curvature posterior around a trained model");
  add_common(c_lap, lap.common);
  add_data_keys(c_lap, lap.common);
  c_lap->add_option("--checkpoint", lap.checkpoint, "point-estimate checkpoint")->required();
  c_lap->add_option("--data", lap.data, "fitting frames (extended XYZ)")->required();
  c_lap->add_option("--prior", lap_prior, "prior precision");
  c_lap->add_option("--out", lap.out, "checkpoint to write")->required();
  c_lap->callback([&rc, c_lap, &lap, &lap_prior]() {
    rc = cmd_laplace_fit(c_lap, lap, lap_prior, c_lap->count("--prior") > 0);
  });

  // predict
  CkptOpts pred;
  CLI::App* c_pred = app.add_subcommand("predict", "write mean predictions as extended XYZ");
  add_common(c_pred, pred.common);
  add_data_keys(c_pred, pred.common);
  c_pred->add_option("--checkpoint", pred.checkpoint, "model checkpoint")->required();
  c_pred->add_option("--data", pred.data, "input frames")->required();
  c_pred->add_option("--out", pred.out, "output frames")->required();
  c_pred->add_option("--samples", pred.samples, "posterior samples for sampled predictions");
  c_pred->callback([&rc, c_pred, &pred]() { rc = cmd_predict(c_pred, pred); });

  // evaluate
  CkptOpts ev;
  std::string ev_ood, ev_rel, ev_scatter;
  CLI::App* c_ev = app.add_subcommand("evaluate", "report error and calibration metrics");
  add_common(c_ev, ev.common);
  add_data_keys(c_ev, ev.common);
  c_ev->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  c_ev->add_option("--data", ev.data, "labeled frames")->required();
  c_ev->add_option("--ood-data", ev_ood, "out-of-distribution frames for AUROC");
  c_ev->add_option("--out", ev.out, "metric records file; stdout when omitted");
  c_ev->add_option("--reliability-out", ev_rel, "energy reliability curve CSV");
  c_ev->add_option("--scatter-out", ev_scatter, "energy error scatter CSV");
  c_ev->add_option("--samples", ev.samples, "posterior samples for sampled predictions");
  c_ev->callback([&rc, c_ev, &ev, &ev_ood, &ev_rel, &ev_scatter]() {
    rc = cmd_evaluate(c_ev, ev, ev_ood, ev_rel, ev_scatter);
  });

  // ood-score
  CkptOpts ood;
  CLI::App* c_ood = app.add_subcommand("ood-score", "per-structure predicted energy sd as CSV");
  add_common(c_ood, ood.common);
  add_data_keys(c_ood, ood.common);
  c_ood->add_option("--checkpoint", ood.checkpoint, "model checkpoint")->required();
  c_ood->add_option("--data", ood.data, "frames to score")->required();
  c_ood->add_option("--out", ood.out, "CSV file; stdout when omitted");
  c_ood->add_option("--samples", ood.samples, "posterior samples for sampled predictions");
  c_ood->callback([&rc, c_ood, &ood]() { rc = cmd_ood_score(c_ood, ood); });

  // calibrate
  CkptOpts cal;
  std::string cal_channel = "energy", cal_map, cal_curve;
  CLI::App* c_cal = app.add_subcommand("calibrate", "reliability curve and calibration error");
  add_common(c_cal, cal.common);
  add_data_keys(c_cal, cal.common);
  c_cal->add_option("--checkpoint", cal.checkpoint, "model checkpoint")->required();
  c_cal->add_option("--data", cal.data, "labeled frames")->required();
  c_cal->add_option("--channel", cal_channel, "energy or force");
  c_cal->add_option("--map", cal_map, "calibration map JSON to apply first");
  c_cal->add_option("--curve-out", cal_curve, "reliability curve CSV");
  c_cal->add_option("--out", cal.out, "metric records file; stdout when omitted");
  c_cal->add_option("--samples", cal.samples, "posterior samples for sampled predictions");
  c_cal->callback([&rc, c_cal, &cal, &cal_channel, &cal_map, &cal_curve]() {
    rc = cmd_calibrate(c_cal, cal, cal_channel, cal_map, cal_curve);
  });

  // recalibrate
  CkptOpts recal;
  std::string recal_channel = "energy";
  CLI::App* c_recal = app.add_subcommand("recalibrate", "fit an isotonic calibration map");
  add_common(c_recal, recal.common);
  add_data_keys(c_recal, recal.common);
  c_recal->add_option("--checkpoint", recal.checkpoint, "model checkpoint")->required();
  c_recal->add_option("--data", recal.data, "labeled fitting frames")->required();
  c_recal->add_option("--channel", recal_channel, "energy or force");
  c_recal->add_option("--out", recal.out, "calibration map JSON")->required();
  c_recal->add_option("--samples", recal.samples, "posterior samples for sampled predictions");
  c_recal->callback([&rc, c_recal, &recal, &recal_channel]() {
    rc = cmd_recalibrate(c_recal, recal, recal_channel);
  });

  // al-select
  CkptOpts sel;
  std::string sel_pool, sel_strategy = "bald_ef", sel_agg = "max";
  std::size_t sel_budget = 0;
  CLI::App* c_sel = app.add_subcommand("al-select", "pick pool structures by acquisition score");
  add_common(c_sel, sel.common);
  add_data_keys(c_sel, sel.common);
  c_sel->add_option("--checkpoint", sel.checkpoint, "ensemble checkpoint")->required();
  c_sel->add_option("--pool", sel_pool, "candidate frames")->required();
  c_sel->add_option("--strategy", sel_strategy, "random, bald_e, bald_f or bald_ef");
  c_sel->add_option("--budget", sel_budget, "number of structures to select")->required();
  c_sel->add_option("--aggregate", sel_agg, "per-structure force score: max or mean");
  c_sel->add_option("--out", sel.out, "manifest CSV; stdout when omitted");
  c_sel->callback([&rc, c_sel, &sel, &sel_pool, &sel_strategy, &sel_budget, &sel_agg]() {
    rc = cmd_al_select(c_sel, sel, sel_pool, sel_strategy, sel_budget, sel_agg);
  });

  // al-round
  AlRoundOpts alr;
  CLI::App* c_alr = app.add_subcommand("al-round", "select, augment, retrain and evaluate");
  add_common(c_alr, alr.ckpt.common);
  add_data_keys(c_alr, alr.ckpt.common);
  c_alr->add_option("--checkpoint", alr.ckpt.checkpoint, "current ensemble checkpoint")->required();
  c_alr->add_option("--train", alr.train_path, "current training frames")->required();
  c_alr->add_option("--pool", alr.pool_path, "candidate frames")->required();
  c_alr->add_option("--val", alr.val_path, "validation frames; defaults to the training set");
  c_alr->add_option("--test", alr.test_path, "held-out evaluation frames")->required();
  c_alr->add_option("--strategy", alr.strategy, "random, bald_e, bald_f or bald_ef");
  c_alr->add_option("--budget", alr.budget, "number of structures to move")->required();
  c_alr->add_option("--out-train", alr.out_train, "augmented training frames");
  c_alr->add_option("--out-pool", alr.out_pool, "remaining pool frames");
  c_alr->add_option("--out-ckpt", alr.out_ckpt, "retrained ensemble checkpoint");
  c_alr->add_option("--manifest", alr.manifest, "selection manifest CSV");
  c_alr->add_option("--metrics-out", alr.metrics_out, "test metric records; stdout when omitted");
  c_alr->callback([&rc, c_alr, &alr]() { rc = cmd_al_round(c_alr, alr); });

  // score
  std::vector<std::string> score_inputs;
  std::string score_out;
  CommonOpts score_common;
  CLI::App* c_score = app.add_subcommand("score", "composite cohort score from metric records");
  add_common(c_score, score_common);
  c_score->add_option("--inputs", score_inputs, "metric record files (the cohort)")
      ->required()
      ->expected(-1);
  c_score->add_option("--out", score_out, "composite records file; stdout when omitted");
  c_score->callback([&rc, &score_inputs, &score_out]() { rc = cmd_score(score_inputs, score_out); });

  // inspect-checkpoint
  std::string insp_path;
  CommonOpts insp_common;
  CLI::App* c_insp = app.add_subcommand("inspect-checkpoint", "print checkpoint header as JSON");
  add_common(c_insp, insp_common);
  c_insp->add_option("--checkpoint", insp_path, "checkpoint to inspect")->required();
  c_insp->callback([&rc, &insp_path]() { rc = cmd_inspect(insp_path); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
