// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// weakdns-cli: corpus building, training stages, enhancement and evaluation.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 a training
// stage was started before its prerequisites, 1 anything else.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "weakdns/config.hpp"
#include "weakdns/evaluate.hpp"
#include "weakdns/fixture.hpp"
#include "weakdns/trainer.hpp"

namespace fs = std::filesystem;
using namespace weakdns;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kSequencing = 4 };

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("weakdns");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%l] %v");
  const char* env = std::getenv("WEAKDNS_LOG");
  const std::string level = env ? env : "info";
  if (level == "error")
    spdlog::set_level(spdlog::level::err);
  else if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else
    spdlog::set_level(spdlog::level::info);
  if (env && level != "error" && level != "info" && level != "debug")
    spdlog::warn("WEAKDNS_LOG={} not recognised, using info", level);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// FNV-1a over the dataset's metadata and every audio file it references.
std::string dataset_hash(const fs::path& root) {
  const auto meta = file_bytes(root / "metadata.jsonl");
  std::uint64_t h = fnv1a64(meta);
  std::istringstream lines(meta);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto id = nlohmann::json::parse(line).at("id").get<std::string>();
    for (const char* sub : {"noisy", "clean", "clean_rev"}) {
      const auto p = root / sub / (id + ".wav");
      if (fs::exists(p)) h = fnv1a64(file_bytes(p), h);
    }
  }
  return hex64(h);
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Datasets for training

struct Splits {
  std::vector<Utterance> train_synth, train_real, val_synth, val_real;
  std::map<std::string, std::string> hashes;
};

std::vector<Utterance> load_prepared(const std::string& dir, const StftConfig& stft_cfg) {
  if (!fs::exists(fs::path(dir) / "metadata.jsonl")) throw DataError("dataset not found: " + dir);
  spdlog::debug("loading dataset {}", dir);
  return prepare_corpus(load_dataset(dir), stft_cfg);
}

/// Last fifth of a list, keeping at least one item on the training side.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_tail(std::vector<Utterance> all) {
  if (all.size() < 2) return {std::move(all), {}};
  const std::size_t n_val = std::max<std::size_t>(1, all.size() / 5);
  std::vector<Utterance> val(all.end() - std::ptrdiff_t(n_val), all.end());
  all.resize(all.size() - n_val);
  return {std::move(all), std::move(val)};
}

Splits load_splits(const RunConfig& cfg) {
  if (cfg.data.dataset.empty()) throw ConfigError("data.dataset is not set");
  Splits s;
  const auto train = load_prepared(cfg.data.dataset, cfg.stft);
  s.hashes["dataset"] = dataset_hash(cfg.data.dataset);
  s.train_synth = select_kind(train, UtteranceKind::synthetic);
  s.train_real = select_kind(train, UtteranceKind::real);
  if (!cfg.data.real_dataset.empty()) {
    auto real = select_kind(load_prepared(cfg.data.real_dataset, cfg.stft), UtteranceKind::real);
    s.train_real.insert(s.train_real.end(), real.begin(), real.end());
    s.hashes["real_dataset"] = dataset_hash(cfg.data.real_dataset);
  }
  if (!cfg.data.val_dataset.empty()) {
    const auto val = load_prepared(cfg.data.val_dataset, cfg.stft);
    s.val_synth = select_kind(val, UtteranceKind::synthetic);
    s.val_real = select_kind(val, UtteranceKind::real);
    s.hashes["val_dataset"] = dataset_hash(cfg.data.val_dataset);
  } else {
    std::tie(s.train_synth, s.val_synth) = split_tail(std::move(s.train_synth));
    std::tie(s.train_real, s.val_real) = split_tail(std::move(s.train_real));
    spdlog::info("no validation dataset; holding out {} synthetic and {} real utterances", s.val_synth.size(),
                 s.val_real.size());
  }
  if (!cfg.data.real_val_dataset.empty()) {
    auto real = select_kind(load_prepared(cfg.data.real_val_dataset, cfg.stft), UtteranceKind::real);
    s.val_real.insert(s.val_real.end(), real.begin(), real.end());
    s.hashes["real_val_dataset"] = dataset_hash(cfg.data.real_val_dataset);
  }
  if (s.train_synth.empty()) throw DataError("training dataset holds no synthetic utterances: " + cfg.data.dataset);
  spdlog::info("train: {} synthetic, {} real; validation: {} synthetic, {} real", s.train_synth.size(),
               s.train_real.size(), s.val_synth.size(), s.val_real.size());
  return s;
}

// ---------------------------------------------------------------------------
// Stage files

fs::path stage_path(const RunConfig& cfg, const std::string& name) { return fs::path(cfg.out_dir) / (name + ".wdns"); }

ModelBundle require_stage(const RunConfig& cfg, const std::string& wanted, const std::string& stage) {
  const auto p = stage_path(cfg, wanted);
  if (!fs::exists(p))
    throw SequencingError(stage + ": requires the " + wanted + " checkpoint (" + p.string() + "); run `train --stage " +
                          (wanted == "pretrain_denoiser" ? "pretrain-denoiser" : "pretrain-quality") + "` first");
  return load_bundle(p);
}

nlohmann::ordered_json stage_metadata(const RunConfig& cfg, const std::string& stage,
                                      const std::map<std::string, std::string>& flags,
                                      const std::map<std::string, std::string>& hashes) {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["protocol"] = cfg.protocol.str();
  j["alpha"] = cfg.loss.alpha;
  j["beta"] = cfg.loss.beta;
  j["seed"] = cfg.seed;
  nlohmann::ordered_json f = nlohmann::ordered_json::object();
  for (const auto& [k, v] : flags) f[k] = v;
  j["flags"] = f;
  nlohmann::ordered_json h = nlohmann::ordered_json::object();
  for (const auto& [k, v] : hashes) h[k] = v;
  j["manifest_hashes"] = h;
  j["config"] = to_json(cfg);
  return j;
}

nlohmann::ordered_json epochs_json(const PretrainResult& r) {
  nlohmann::ordered_json j;
  j["val_at_init"] = r.val_at_init;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs)
    j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  return j;
}

PretrainConfig pretrain_config(const RunConfig& cfg, std::size_t epochs, const AdamConfig& adam) {
  PretrainConfig pc;
  pc.epochs = epochs;
  pc.minibatch = cfg.protocol.minibatch;
  pc.adam = adam;
  pc.loss = cfg.loss;
  pc.stft = cfg.stft;
  pc.seed = cfg.seed;
  return pc;
}

void log_epochs(const char* what, const PretrainResult& r) {
  spdlog::info("{}: validation loss at init {:.6g}", what, r.val_at_init);
  for (const auto& e : r.epochs)
    spdlog::info("{}: epoch {} train {:.6g} val {:.6g}", what, e.epoch, e.train_loss, e.val_loss);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_fixture(const RunConfig& cfg, const fixture::FixtureSpec& base, const std::string& dir) {
  fixture::FixtureSpec spec = base;
  spec.seed = cfg.seed;
  const auto manifest = fixture::write_sources(dir, fixture::make_sources(spec));
  std::cout << "wrote " << spec.clean << " clean, " << spec.noise << " noise and " << spec.real
            << " real sources; manifest " << manifest.string() << "\n";
  return kOk;
}

int cmd_mix(const RunConfig& cfg, const std::string& dataset) {
  if (cfg.data.manifest.empty()) throw ConfigError("mix: no manifest given (data.manifest or --manifest)");
  if (!fs::exists(cfg.data.manifest)) throw DataError("missing file: " + cfg.data.manifest);
  const Corpus c = build_corpus(cfg.data.manifest, cfg.corpus, dataset);
  std::size_t synth = 0, real = 0, rev = 0;
  std::map<int, std::size_t> hist;
  for (const auto& m : c.metadata) {
    if (m.kind == UtteranceKind::real) {
      ++real;
      continue;
    }
    ++synth;
    rev += m.reverberated ? 1 : 0;
    ++hist[int(std::floor(m.snr_db / 5.0)) * 5];
  }
  std::cout << "dataset " << dataset << ": " << c.records.size() << " utterances (" << synth << " synthetic, " << real
            << " real)\n";
  std::printf("reverberated fraction: %.3f\n", synth ? double(rev) / double(synth) : 0.0);
  std::cout << "SNR histogram (dB):\n";
  for (const auto& [lo, n] : hist) std::printf("  [%3d, %3d): %zu\n", lo, lo + 5, n);
  return kOk;
}

int cmd_train(RunConfig cfg, const std::string& stage, const std::map<std::string, std::string>& flags,
              const std::string& resume) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  auto need = [&](const std::string& name) { return require_stage(cfg, name, stage); };

  if (stage == "pretrain-denoiser") {
    const Splits s = load_splits(cfg);
    ModelBundle b;
    b.norm = fit_norm_stats(s.train_synth);
    b.denoiser = DenoiserNet<float>::init(derive_seed(cfg.seed, "denoiser-init"));
    AdamState<float> opt;
    StepLog log(fs::path(cfg.out_dir) / "pretrain_denoiser_steps.csv");
    const auto r = pretrain_denoiser(*b.denoiser, opt, b.norm, s.train_synth, s.val_synth,
                                     pretrain_config(cfg, cfg.pretrain.denoiser_epochs, cfg.denoiser_adam), &log);
    log_epochs(stage.c_str(), r);
    save_bundle(stage_path(cfg, "pretrain_denoiser"), b);
    auto meta = stage_metadata(cfg, stage, flags, s.hashes);
    meta["training"] = epochs_json(r);
    write_json(fs::path(cfg.out_dir) / "pretrain_denoiser.json", meta);
    return kOk;
  }

  if (stage == "pretrain-quality") {
    ModelBundle b = need("pretrain_denoiser");
    const Splits s = load_splits(cfg);
    b.quality = QualityNet<float>::init(derive_seed(cfg.seed, "quality-init"));
    AdamState<float> opt;
    StepLog log(fs::path(cfg.out_dir) / "pretrain_quality_steps.csv");
    const auto r = pretrain_qualitynet(*b.quality, opt, *b.denoiser, b.norm, s.train_synth, s.val_synth,
                                       pretrain_config(cfg, cfg.pretrain.quality_epochs, cfg.quality_adam),
                                       default_quality_oracle(), &log);
    log_epochs(stage.c_str(), r);
    ModelBundle out;
    out.quality = b.quality;
    out.norm = b.norm;
    save_bundle(stage_path(cfg, "pretrain_quality"), out);
    auto meta = stage_metadata(cfg, stage, flags, s.hashes);
    meta["training"] = epochs_json(r);
    write_json(fs::path(cfg.out_dir) / "pretrain_quality.json", meta);
    return kOk;
  }

  if (stage == "finetune-stage1") {
    ModelBundle b = need("pretrain_denoiser");
    b.quality = need("pretrain_quality").quality;
    const Splits s = load_splits(cfg);
    AdamState<float> dopt, qopt;
    StepLog log(fs::path(cfg.out_dir) / "stage1_steps.csv");
    const auto rd = pretrain_denoiser(*b.denoiser, dopt, b.norm, s.train_synth, s.val_synth,
                                      pretrain_config(cfg, cfg.pretrain.denoiser_epochs, cfg.denoiser_adam), &log);
    log_epochs("stage1 denoiser", rd);
    const auto rq = pretrain_qualitynet(*b.quality, qopt, *b.denoiser, b.norm, s.train_synth, s.val_synth,
                                        pretrain_config(cfg, cfg.pretrain.quality_epochs, cfg.quality_adam),
                                        default_quality_oracle(), &log);
    log_epochs("stage1 quality", rq);
    save_bundle(stage_path(cfg, "stage1"), b);
    auto meta = stage_metadata(cfg, stage, flags, s.hashes);
    meta["denoiser"] = epochs_json(rd);
    meta["quality"] = epochs_json(rq);
    write_json(fs::path(cfg.out_dir) / "stage1.json", meta);
    return kOk;
  }

  if (stage == "finetune-stage2") {
    ModelBundle b = need("pretrain_denoiser");
    b.quality = need("pretrain_quality").quality;
    if (fs::exists(stage_path(cfg, "stage1"))) {
      spdlog::info("starting from the stage-1 checkpoint");
      b = load_bundle(stage_path(cfg, "stage1"));
    }
    const Splits s = load_splits(cfg);
    if (cfg.protocol.r > 0 && s.train_real.empty())
      throw DataError("protocol " + cfg.protocol.str() + " needs real recordings but the training data has none");

    TrainConfig tc;
    tc.protocol = cfg.protocol;
    tc.loss = cfg.loss;
    tc.stft = cfg.stft;
    tc.denoiser_adam = cfg.denoiser_adam;
    tc.quality_adam = cfg.quality_adam;
    tc.checkpoint_every = cfg.checkpoint_every;
    tc.checkpoint_unit = cfg.checkpoint_unit;
    tc.seed = cfg.seed;
    tc.out_dir = fs::path(cfg.out_dir) / "stage2";
    tc.manifest_hashes = s.hashes;
    tc.flags = flags;
    tc.record_checksums = false;
    fs::create_directories(tc.out_dir);

    Trainer trainer(tc,
                    make_train_state(*b.denoiser, *b.quality, b.norm, s.train_real.size(), s.train_synth.size(),
                                     cfg.seed),
                    s.train_real, s.train_synth);
    if (!resume.empty()) {
      trainer.load(resume);
      spdlog::info("resumed from {} at protocol run {}", resume, trainer.state().protocol_run);
    }
    trainer.log().open(tc.out_dir / "steps.csv", !resume.empty());
    while (trainer.state().cycle < cfg.cycles) {
      trainer.run_cycle();
      const auto& recs = trainer.log().records();
      spdlog::info("cycle {} done; last loss {:.6g}", trainer.state().cycle,
                   recs.empty() ? 0.0 : recs.back().loss_value);
    }
    trainer.save(tc.out_dir / "final");

    std::vector<Candidate> cands;
    std::vector<std::string> names;
    for (auto idx : trainer.state().checkpoints) {
      const auto stem = trainer.checkpoint_stem(idx);
      const auto bundle = load_bundle(stem.string() + ".wdns");
      cands.push_back({stem.filename().string(), *bundle.denoiser, *bundle.quality});
    }
    cands.push_back({"final", trainer.state().denoiser, trainer.state().quality});
    const Selection sel = select_model(cands, b.norm, s.val_real, s.val_synth, cfg.loss, cfg.stft);
    const std::size_t chosen = sel.chosen_real ? *sel.chosen_real : *sel.chosen_synth;
    ModelBundle out;
    out.denoiser = cands[chosen].denoiser;
    out.quality = cands[chosen].quality;
    out.norm = b.norm;
    save_bundle(fs::path(cfg.out_dir) / "final.wdns", out);

    nlohmann::ordered_json j = stage_metadata(cfg, stage, flags, s.hashes);
    j["candidates"] = nlohmann::ordered_json::array();
    for (const auto& c : cands) j["candidates"].push_back(c.name);
    j["real_losses"] = sel.real_losses;
    j["synth_losses"] = sel.synth_losses;
    j["real_ranking"] = sel.real_ranking;
    j["synth_ranking"] = sel.synth_ranking;
    j["chosen"] = cands[chosen].name;
    j["chosen_by"] = sel.chosen_real ? "real" : "synthetic";
    j["rankings_agree"] = sel.chosen_real && sel.chosen_synth ? nlohmann::ordered_json(*sel.chosen_real == *sel.chosen_synth)
                                                              : nlohmann::ordered_json(nullptr);
    write_json(fs::path(cfg.out_dir) / "selection.json", j);
    spdlog::info("selected {} by {} validation loss", cands[chosen].name, sel.chosen_real ? "real" : "synthetic");
    return kOk;
  }

  throw ConfigError("unknown stage '" + stage + "'");
}

int cmd_enhance(const std::string& checkpoint, const std::string& in, const std::string& out) {
  const Enhancer enh(load_bundle(checkpoint));
  const Waveform x = read_wav(in);
  write_wav(out, enh.enhance(x));
  spdlog::info("enhanced {} ({} samples) -> {}", in, x.size(), out);
  return kOk;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint, const std::string& dataset,
                 const std::string& report) {
  if (dataset.empty()) throw ConfigError("evaluate: no dataset given (data.val_dataset or --dataset)");
  const Enhancer enh(load_bundle(checkpoint), cfg.stft);
  const auto rep = evaluate(enh, load_prepared(dataset, cfg.stft));
  write_eval_csv(report, rep);
  for (const auto& a : rep.aggregates)
    if (a.delta_seg_snr) spdlog::info("{}: delta_seg_snr {:.3f} dB", a.id, *a.delta_seg_snr);
  std::cout << "wrote " << report << " (" << rep.rows.size() << " rows)\n";
  return kOk;
}

int cmd_identity(const std::string& out) {
  ModelBundle b;
  b.identity = true;
  save_bundle(out, b);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"weakdns: weakly supervised speech enhancement with a learned quality estimator"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for every random choice");
  app.add_option("--out", out_dir, "Output directory");

  auto* fixture_cmd = app.add_subcommand("fixture", "Write a synthetic source corpus and manifest");
  fixture::FixtureSpec fspec;
  std::string fixture_dir;
  fixture_cmd->add_option("--dir", fixture_dir, "Destination directory")->required();
  fixture_cmd->add_option("--clean", fspec.clean, "Clean utterances");
  fixture_cmd->add_option("--noise", fspec.noise, "Noise recordings");
  fixture_cmd->add_option("--real", fspec.real, "Reference-free recordings");
  fixture_cmd->add_option("--seconds", fspec.seconds, "Utterance length");
  fixture_cmd->add_option("--prefix", fspec.prefix, "Id prefix");

  auto* mix_cmd = app.add_subcommand("mix", "Mix a manifest into a dataset");
  std::string manifest, mix_dataset;
  std::optional<double> snr_lo, snr_hi, reverb;
  mix_cmd->add_option("--manifest", manifest, "Source manifest (overrides data.manifest)");
  mix_cmd->add_option("--dataset", mix_dataset, "Output dataset directory (overrides data.dataset)");
  mix_cmd->add_option("--snr-lo", snr_lo, "Lowest SNR in dB");
  mix_cmd->add_option("--snr-hi", snr_hi, "Highest SNR in dB");
  mix_cmd->add_option("--reverb-fraction", reverb, "Fraction of reverberated utterances");

  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  std::string stage, protocol_flag, alpha_flag, beta_flag, resume;
  std::optional<std::size_t> cycles;
  std::string train_dataset, val_dataset;
  train_cmd->add_option("--stage", stage, "Training stage")
      ->required()
      ->check(CLI::IsMember({"pretrain-denoiser", "pretrain-quality", "finetune-stage1", "finetune-stage2"}));
  train_cmd->add_option("--protocol", protocol_flag, "Alternating protocol r-s-p");
  train_cmd->add_option("--alpha", alpha_flag, "Weight of the synthetic loss in J_total");
  train_cmd->add_option("--beta", beta_flag, "Weight of the joint term in J_synth");
  train_cmd->add_option("--cycles", cycles, "Stage-2 protocol cycles");
  train_cmd->add_option("--dataset", train_dataset, "Training dataset (overrides data.dataset)");
  train_cmd->add_option("--val-dataset", val_dataset, "Validation dataset (overrides data.val_dataset)");
  train_cmd->add_option("--resume", resume, "Stage-2 checkpoint stem to resume from");

  auto* enhance_cmd = app.add_subcommand("enhance", "Enhance one WAV file");
  std::string checkpoint, in_wav, out_wav;
  enhance_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  enhance_cmd->add_option("--input", in_wav, "Noisy 16 kHz WAV")->required();
  enhance_cmd->add_option("--output", out_wav, "Enhanced WAV")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "Per-utterance metrics report");
  std::string eval_ckpt, eval_dataset, report;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "Dataset directory (defaults to data.val_dataset)");
  eval_cmd->add_option("--report", report, "CSV report path (defaults to <out>/report.csv)");

  auto* identity_cmd = app.add_subcommand("identity", "Write a checkpoint whose mask is always 1");
  std::string identity_out;
  identity_cmd->add_option("--output", identity_out, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.corpus.seed = *seed;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;

    if (*fixture_cmd) return cmd_fixture(cfg, fspec, fixture_dir);

    if (*mix_cmd) {
      if (!manifest.empty()) cfg.data.manifest = manifest;
      if (snr_lo) cfg.corpus.snr_lo = *snr_lo;
      if (snr_hi) cfg.corpus.snr_hi = *snr_hi;
      if (reverb) cfg.corpus.reverb_fraction = *reverb;
      const std::string dataset =
          !mix_dataset.empty() ? mix_dataset
                               : (!cfg.data.dataset.empty() ? cfg.data.dataset : (fs::path(cfg.out_dir) / "dataset").string());
      cfg.validate();
      return cmd_mix(cfg, dataset);
    }

    if (*train_cmd) {
      std::map<std::string, std::string> flags;
      if (!protocol_flag.empty()) {
        cfg.protocol = ProtocolSpec::parse(protocol_flag, cfg.protocol.minibatch);
        flags["--protocol"] = protocol_flag;
      }
      if (!alpha_flag.empty()) {
        try {
          cfg.loss.alpha = std::stod(alpha_flag);
        } catch (const std::exception&) {
          throw ConfigError("--alpha: not a number: " + alpha_flag);
        }
        flags["--alpha"] = alpha_flag;
      }
      if (!beta_flag.empty()) {
        try {
          cfg.loss.beta = std::stod(beta_flag);
        } catch (const std::exception&) {
          throw ConfigError("--beta: not a number: " + beta_flag);
        }
        flags["--beta"] = beta_flag;
      }
      if (cycles) cfg.cycles = *cycles;
      if (!train_dataset.empty()) cfg.data.dataset = train_dataset;
      if (!val_dataset.empty()) cfg.data.val_dataset = val_dataset;
      return cmd_train(cfg, stage, flags, resume);
    }

    if (*enhance_cmd) return cmd_enhance(checkpoint, in_wav, out_wav);

    if (*eval_cmd) {
      const std::string dataset = eval_dataset.empty() ? cfg.data.val_dataset : eval_dataset;
      const std::string rep = report.empty() ? (fs::path(cfg.out_dir) / "report.csv").string() : report;
      return cmd_evaluate(cfg, eval_ckpt, dataset, rep);
    }

    if (*identity_cmd) return cmd_identity(identity_out);
  } catch (const SampleRateMismatch& e) {
    spdlog::error("{}", e.what());
    return kConfig;
  } catch (const SequencingError& e) {
    spdlog::error("{}", e.what());
    return kSequencing;
  } catch (const DomainError& e) {
    spdlog::error("{}", e.what());
    return kConfig;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const StreamExhausted& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kFailure;
}
