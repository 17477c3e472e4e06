// Copyright 2026 The emofuse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "emofuse/audio.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/error.hpp"
#include "emofuse/feature_matrix.hpp"
#include "emofuse/hash.hpp"
#include "emofuse/log.hpp"
#include "emofuse/mfcc.hpp"
#include "emofuse/model.hpp"
#include "emofuse/prosody.hpp"
#include "emofuse/ssrl.hpp"
#include "emofuse/train.hpp"

namespace emofuse::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad flag values and flag combinations; mapped to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SsrlConfig ssrl;
  PretrainConfig pretrain;
  HumpCatConfig model;
  TrainConfig train;
  std::string subset = "speakers:0.2";
  bool freeze_branches = false;
  LabelMap labels = LabelMap::defaults();
  json resolved;
  std::string hash;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open config");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_flag,
                      const std::string& subset_flag) {
  json j = json::object();
  if (!path.empty()) j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::vector<std::string> known{"seed",  "ssrl",     "pretrain", "model",
                                              "train", "finetune", "label_map"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  RunConfig c;
  try {
    c.seed = seed_flag ? *seed_flag : j.value("seed", std::uint64_t{0});
    c.ssrl = SsrlConfig::from_json(j.value("ssrl", json::object()));
    c.pretrain = PretrainConfig::from_json(j.value("pretrain", json::object()));
    c.model = HumpCatConfig::from_json(j.value("model", json::object()));
    c.train = TrainConfig::from_json(j.value("train", json::object()));
    const json ft = j.value("finetune", json::object());
    c.subset = ft.value("subset", c.subset);
    c.freeze_branches = ft.value("freeze_branches", false);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!subset_flag.empty()) c.subset = subset_flag;
  try {
    SubsetPolicy::parse(c.subset);
  } catch (const ParameterError& e) {
    throw UsageError(e.what());
  }
  if (j.contains("label_map")) {
    fs::path lm = j.at("label_map").get<std::string>();
    if (lm.is_relative()) lm = fs::path(path).parent_path() / lm;
    c.labels = LabelMap::from_file(lm);
  }
  c.pretrain.seed = c.seed;
  c.model.seed = c.seed;
  c.train.seed = c.seed;
  c.resolved = {{"seed", c.seed},
                {"ssrl", c.ssrl.to_json()},
                {"pretrain", c.pretrain.to_json()},
                {"model", c.model.to_json()},
                {"train", c.train.to_json()},
                {"finetune", {{"subset", c.subset}, {"freeze_branches", c.freeze_branches}}},
                {"label_map", c.labels.to_json()}};
  c.hash = config_hash(c.resolved);
  return c;
}

fs::path prepare_out(const std::string& out) {
  const fs::path dir = out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_run_record(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
  write_json(dir / "run.json", {{"command", command},
                                {"config_hash", cfg.hash},
                                {"seed", cfg.seed},
                                {"config", cfg.resolved}});
}

Checkpoint stamp(Checkpoint ckpt, const RunConfig& cfg) {
  ckpt.config["run"] = {{"config_hash", cfg.hash}, {"seed", cfg.seed}};
  return ckpt;
}

std::optional<SsrlEncoder> load_encoder(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return SsrlEncoder::load(load_checkpoint(path));
}

void check_encoder(const HumpCatConfig& model, const SsrlEncoder* encoder) {
  if (!model.use_ssrl) return;
  if (!encoder) throw UsageError("--encoder is required when model.use_ssrl is true");
  const SsrlConfig& e = encoder->config();
  if (e.embed_dim != model.ssrl_dim || e.selected_layers != model.ssrl_layers) {
    throw ConfigError("encoder (dim " + std::to_string(e.embed_dim) +
                      ") does not match model.ssrl_dim / model.ssrl_layers");
  }
}

AudioSegment read_audio(const UtteranceRecord& r) {
  try {
    AudioSegment a = read_wav(r.path);
    return a.sample_rate == kTargetRate ? a : resample_16k(a);
  } catch (const Error& e) {
    throw FormatError(r.path.string() + ": " + e.what());
  }
}

std::vector<Sample> load_samples(const std::string& manifest, const RunConfig& cfg,
                                 const SsrlEncoder* encoder) {
  std::vector<Sample> out;
  for (const UtteranceRecord& r : load_manifest(manifest, cfg.labels)) {
    auto s = samples_from_audio(read_audio(r), r, encoder);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  log_info("loaded " + std::to_string(out.size()) + " segments from " + manifest);
  return out;
}

std::string join(const std::vector<std::string>& items, const char* sep = " ") {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : sep) + i;
  return s;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t speakers = 5;
  std::size_t per_class = 4;
  std::uint64_t seed = 0;
  std::string recipe = "standard";
  std::string prefix = "spk";
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const auto recipe = parse_synth_recipe(a.recipe);
  if (!recipe) throw UsageError("unknown recipe '" + a.recipe + "'");
  const fs::path dir = prepare_out(a.out);
  std::vector<UtteranceRecord> records;
  for (const SynthUtterance& u : synth_corpus(a.speakers, a.per_class, a.seed, *recipe, a.prefix)) {
    write_wav(dir / u.record.path, u.audio);
    records.push_back(u.record);
  }
  write_manifest(dir / "manifest.csv", records);
  out << "synth: wrote " << records.size() << " utterances and " << (dir / "manifest.csv").string()
      << "\n";
  return kExitOk;
}

// ---- extract --------------------------------------------------------------

struct ExtractArgs {
  std::string manifest;
  std::string out;
  std::string features = "mfcc,prosody";
  std::string encoder;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 0;
};

std::string file_stem_for(const fs::path& utterance, const fs::path& base) {
  std::string rel = fs::relative(utterance, base).replace_extension().generic_string();
  if (rel.empty() || rel.starts_with("..")) rel = utterance.stem().string();
  std::string name;
  for (char ch : rel) name += ch == '/' ? std::string("__") : std::string(1, ch);
  return name;
}

int cmd_extract(const ExtractArgs& a, std::ostream& out, std::ostream& err) {
  std::string out_dir = a.out;
  if (out_dir.empty()) {
    const char* cache = std::getenv("EMOFUSE_CACHE_DIR");
    if (!cache || !*cache) throw UsageError("--out not given and EMOFUSE_CACHE_DIR is unset");
    out_dir = cache;
  }
  std::vector<std::string> kinds;
  {
    std::stringstream ss(a.features);
    for (std::string k; std::getline(ss, k, ',');) {
      if (k != "mfcc" && k != "prosody" && k != "ssrl") throw UsageError("unknown feature kind '" + k + "'");
      kinds.push_back(k);
    }
  }
  if (kinds.empty()) throw UsageError("--features is empty");
  const bool want_ssrl = std::find(kinds.begin(), kinds.end(), "ssrl") != kinds.end();
  if (want_ssrl && a.encoder.empty()) throw UsageError("feature kind ssrl needs --encoder");
  const RunConfig cfg = load_config(a.config, a.seed, "");
  const auto encoder = load_encoder(a.encoder);
  std::string encoder_hash;
  if (encoder) encoder_hash = to_hex(fnv1a64(encode_checkpoint(encoder->save())));

  const auto records = load_manifest(a.manifest, cfg.labels);
  const fs::path dir = prepare_out(out_dir);
  for (const auto& k : kinds) fs::create_directories(dir / k);
  const fs::path base = fs::path(a.manifest).parent_path();
  const FrameConfig frames;
  const std::string frames_hash = config_hash(frames.to_json());

  struct Status {
    std::size_t written = 0, skipped = 0;
    std::string error;
  };
  std::vector<Status> status(records.size());
  auto work = [&](std::size_t i) {
    const UtteranceRecord& r = records[i];
    Status& st = status[i];
    try {
      std::ifstream in(r.path, std::ios::binary);
      if (!in) throw IoError("cannot open");
      const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      const std::string source_hash = to_hex(fnv1a64(bytes));
      const std::string stem = file_stem_for(r.path, base);
      std::optional<AudioSegment> audio;
      FeatureMatrix mfcc;
      for (const std::string& kind : kinds) {
        const fs::path file = dir / kind / (stem + ".fmx");
        const std::string key = to_hex(fnv1a64(kind + "|" + frames_hash + "|" + source_hash + "|" +
                                               (kind == "ssrl" ? encoder_hash : "")));
        if (fs::exists(file)) {
          try {
            if (read_fmx_meta(file).value("extract_hash", "") == key) {
              ++st.skipped;
              continue;
            }
          } catch (const Error&) {
            // Unreadable previous output: rewrite it.
          }
        }
        if (!audio) {
          AudioSegment a16 = decode_wav(bytes, r.path.string());
          audio = a16.sample_rate == kTargetRate ? std::move(a16) : resample_16k(a16);
        }
        FeatureMatrix m;
        if (kind == "mfcc" || kind == "ssrl") {
          if (mfcc.rows == 0) mfcc = extract_mfcc39(*audio, frames);
        }
        if (kind == "mfcc") {
          m = mfcc;
        } else if (kind == "prosody") {
          m = extract_prosody(*audio, frames).to_matrix();
        } else {
          const auto layers = encoder->config().conv_frontend
                                  ? encoder->selected_hiddens(frame_waveform(audio->samples))
                                  : encoder->selected_hiddens(mfcc);
          m = FeatureMatrix(layers[0].rows, layers[0].cols * layers.size());
          for (std::size_t l = 0; l < layers.size(); ++l) {
            for (std::size_t t = 0; t < m.rows; ++t) {
              std::copy(layers[l].row(t).begin(), layers[l].row(t).end(),
                        m.row(t).begin() + static_cast<std::ptrdiff_t>(l * layers[l].cols));
            }
          }
          m.meta["layers"] = encoder->config().selected_layers;
        }
        m.meta["feature"] = kind;
        m.meta["extract_hash"] = key;
        m.meta["source_hash"] = source_hash;
        m.meta["speaker_id"] = r.speaker_id;
        m.meta["label"] = std::string(to_string(r.label));
        write_fmx(file, m);
        ++st.written;
      }
    } catch (const std::exception& e) {
      st.error = r.path.string() + ": " + e.what();
    }
  };

  std::size_t n_workers = a.workers ? a.workers : std::max(1u, std::thread::hardware_concurrency());
  n_workers = std::min(n_workers, std::max<std::size_t>(1, records.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < records.size();) work(i);
    });
  }
  for (auto& t : pool) t.join();

  std::size_t written = 0, skipped = 0, failed = 0;
  for (const Status& st : status) {
    written += st.written;
    skipped += st.skipped;
    if (!st.error.empty()) {
      ++failed;
      err << "error: " << st.error << "\n";
    }
  }
  out << "extract: " << written << " written, " << skipped << " skipped, " << failed << " failed\n";
  return failed ? kExitFailure : kExitOk;
}

// ---- pretrain -------------------------------------------------------------

struct CommonArgs {
  std::string manifest;
  std::string out;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string encoder;
  std::string val_manifest;
};

int cmd_pretrain(const CommonArgs& a, std::ostream& out) {
  const RunConfig cfg = load_config(a.config, a.seed, "");
  std::vector<FeatureMatrix> feats, inputs;
  for (const UtteranceRecord& r : load_manifest(a.manifest, cfg.labels)) {
    for (const AudioSegment& seg : clip_pad_7s(read_audio(r))) {
      feats.push_back(extract_mfcc39(seg));
      if (cfg.ssrl.conv_frontend) inputs.push_back(frame_waveform(seg.samples));
    }
  }
  if (feats.empty()) throw ParameterError("pretrain: manifest yields no segments");
  const fs::path dir = prepare_out(a.out);
  SsrlEncoder encoder(cfg.ssrl, cfg.seed);
  const PretrainResult res = pretrain(encoder, feats, cfg.pretrain, inputs);
  save_checkpoint(dir / "encoder.ckpt", stamp(encoder.save(), cfg));
  write_json(dir / "pretrain_history.json", {{"config_hash", cfg.hash},
                                             {"seed", cfg.seed},
                                             {"eval_loss", res.history.eval_loss},
                                             {"train_loss", res.history.train_loss},
                                             {"kmeans_inertia", res.history.kmeans_inertia}});
  write_run_record(dir, "pretrain", cfg);
  out << "pretrain: masked-prediction loss " << fixed(res.history.eval_loss.front()) << " -> "
      << fixed(res.history.eval_loss.back()) << " over " << cfg.pretrain.epochs << " epochs\n";
  return kExitOk;
}

// ---- train / finetune / evaluate ------------------------------------------

int cmd_train(const CommonArgs& a, std::ostream& out) {
  const RunConfig cfg = load_config(a.config, a.seed, "");
  const auto encoder = load_encoder(a.encoder);
  const SsrlEncoder* enc = cfg.model.use_ssrl && encoder ? &*encoder : nullptr;
  check_encoder(cfg.model, enc);
  const auto train_set = load_samples(a.manifest, cfg, enc);
  const auto val_set = a.val_manifest.empty() ? std::vector<Sample>{} : load_samples(a.val_manifest, cfg, enc);
  const fs::path dir = prepare_out(a.out);
  HumpCat model(cfg.model);
  const TrainResult res = train(model, train_set, val_set, cfg.train);
  save_checkpoint(dir / "model.ckpt", stamp(res.best, cfg));
  write_text(dir / "history.csv", history_csv(res.history));
  write_run_record(dir, "train", cfg);
  out << "train: best epoch " << res.history.best_epoch << ", "
      << (val_set.empty() ? "train" : "validation") << " UA " << fixed(res.history.best_val_ua) << "\n";
  return kExitOk;
}

int cmd_finetune(const CommonArgs& a, const std::string& source, const std::string& subset,
                 bool freeze_flag, std::ostream& out) {
  const RunConfig cfg = load_config(a.config, a.seed, subset);
  const auto encoder = load_encoder(a.encoder);
  const SsrlEncoder* enc = cfg.model.use_ssrl && encoder ? &*encoder : nullptr;
  check_encoder(cfg.model, enc);
  const Checkpoint src = load_checkpoint(source);
  const auto target = load_samples(a.manifest, cfg, enc);
  const auto val_set = a.val_manifest.empty() ? std::vector<Sample>{} : load_samples(a.val_manifest, cfg, enc);
  const fs::path dir = prepare_out(a.out);
  HumpCat model(cfg.model);
  FineTuneConfig fc;
  fc.train = cfg.train;
  fc.subset = SubsetPolicy::parse(cfg.subset);
  fc.freeze_branches = cfg.freeze_branches || freeze_flag;
  const FineTuneResult res = fine_tune(model, src, target, val_set, fc);
  out << "finetune: subset " << fc.subset.to_string() << " selected speakers: "
      << join(res.subset.speakers) << "\n";
  save_checkpoint(dir / "model.ckpt", stamp(res.train.best, cfg));
  write_text(dir / "history.csv", history_csv(res.train.history));
  write_json(dir / "subset.json", {{"policy", fc.subset.to_string()},
                                   {"seed", cfg.seed},
                                   {"speakers", res.subset.speakers},
                                   {"utterances", res.subset.utterances}});
  write_run_record(dir, "finetune", cfg);
  out << "finetune: best epoch " << res.train.history.best_epoch << ", UA "
      << fixed(res.train.history.best_val_ua) << "\n";
  return kExitOk;
}

void write_confusion(const fs::path& dir, const std::string& suffix, const ConfusionMatrix& cm) {
  write_text(dir / ("confusion" + suffix + ".csv"), confusion_csv(cm));
  write_text(dir / ("confusion_heatmap" + suffix + ".csv"), confusion_heatmap_csv(cm));
}

int cmd_evaluate(const CommonArgs& a, const std::string& ckpt_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const HumpCat model = HumpCat::load(ckpt);
  RunConfig cfg = load_config(a.config, a.seed, "");
  const auto encoder = load_encoder(a.encoder);
  const SsrlEncoder* enc = model.config().use_ssrl && encoder ? &*encoder : nullptr;
  check_encoder(model.config(), enc);
  const auto test = load_samples(a.manifest, cfg, enc);
  const Evaluation ev = evaluate(model, test);
  const fs::path dir = prepare_out(a.out);

  ResultsReport report;
  report.command = "evaluate";
  const json run = ckpt.config.value("run", json::object());
  report.config_hash = run.value("config_hash", config_hash(ckpt.config));
  report.seed = run.value("seed", std::uint64_t{0});
  FoldSummary s;
  s.wa = ev.metrics.wa;
  s.ua = ev.metrics.ua;
  s.n_test = ev.truth.size();
  std::set<std::string> speakers;
  for (const Sample& x : test) speakers.insert(x.speaker_id);
  s.test_speakers.assign(speakers.begin(), speakers.end());
  s.confusion = ev.metrics.confusion;
  report.folds.push_back(s);
  write_json(dir / "results.json", report.to_json());
  write_confusion(dir, "", ev.metrics.confusion);
  std::ostringstream preds;
  preds << "utterance_id,true,predicted\n";
  for (std::size_t i = 0; i < ev.truth.size(); ++i) {
    preds << ev.utterance_ids[i] << ',' << to_string(static_cast<Emotion>(ev.truth[i])) << ','
          << to_string(static_cast<Emotion>(ev.predicted[i])) << '\n';
  }
  write_text(dir / "predictions.csv", preds.str());
  out << "evaluate: WA " << fixed(ev.metrics.wa) << " UA " << fixed(ev.metrics.ua) << " over "
      << ev.truth.size() << " utterances\n";
  return kExitOk;
}

// ---- kfold ----------------------------------------------------------------

int cmd_kfold(const CommonArgs& a, std::size_t folds, std::ostream& out) {
  const RunConfig cfg = load_config(a.config, a.seed, "");
  const auto encoder = load_encoder(a.encoder);
  const SsrlEncoder* enc = cfg.model.use_ssrl && encoder ? &*encoder : nullptr;
  check_encoder(cfg.model, enc);
  const auto samples = load_samples(a.manifest, cfg, enc);
  const fs::path dir = prepare_out(a.out);
  KfoldOptions opt;
  opt.model = cfg.model;
  opt.train = cfg.train;
  opt.n_folds = folds;
  opt.seed = cfg.seed;
  opt.config_hash = cfg.hash;
  const KfoldResult res = run_kfold(samples, opt);

  ConfusionMatrix total(cfg.model.n_classes);
  for (std::size_t f = 0; f < res.report.folds.size(); ++f) {
    const FoldSummary& s = res.report.folds[f];
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "_fold%02zu", f);
    ResultsReport one = res.report;
    one.folds = {s};
    write_json(dir / ("results" + std::string(suffix) + ".json"), one.to_json());
    write_confusion(dir, suffix, s.confusion);
    write_text(dir / ("history" + std::string(suffix) + ".csv"), history_csv(res.histories[f]));
    for (std::size_t t = 0; t < total.n_classes(); ++t) {
      for (std::size_t p = 0; p < total.n_classes(); ++p) {
        for (std::size_t k = 0; k < s.confusion.at(t, p); ++k) total.add(t, p);
      }
    }
    out << "kfold: fold " << f << " test " << join(s.test_speakers, ",") << " WA " << fixed(s.wa)
        << " UA " << fixed(s.ua) << "\n";
  }
  write_json(dir / "results.json", res.report.to_json());
  write_confusion(dir, "", total);
  write_run_record(dir, "kfold", cfg);
  out << "kfold: " << folds << " folds, UA " << fixed(res.report.ua_mean()) << " +/- "
      << fixed(res.report.ua_std()) << ", WA " << fixed(res.report.wa_mean()) << " +/- "
      << fixed(res.report.wa_std()) << " (config " << cfg.hash << ")\n";
  return kExitOk;
}

void add_common(CLI::App* sub, CommonArgs& a, bool needs_out = true) {
  sub->add_option("--manifest", a.manifest, "Utterance manifest CSV")->required();
  auto* o = sub->add_option("--out", a.out, "Output directory");
  if (needs_out) o->required();
  sub->add_option("--config", a.config, "JSON run configuration");
  sub->add_option("--seed", a.seed, "Seed (overrides the config)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"emofuse: speech emotion recognition with fused prosody, MFCC and SSRL features",
               "emofuse"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Render a synthetic corpus and its manifest");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--speakers", synth.speakers, "Number of speakers")->capture_default_str();
  c_synth->add_option("--per-class", synth.per_class, "Utterances per speaker and class")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  c_synth->add_option("--recipe", synth.recipe, "standard | shifted | pitch-tilt")->capture_default_str();
  c_synth->add_option("--prefix", synth.prefix, "Speaker id prefix")->capture_default_str();

  ExtractArgs extract;
  auto* c_extract = app.add_subcommand("extract", "Write FMX1 feature files per utterance");
  c_extract->add_option("--manifest", extract.manifest, "Utterance manifest CSV")->required();
  c_extract->add_option("--out", extract.out, "Output directory (default: $EMOFUSE_CACHE_DIR)");
  c_extract->add_option("--features", extract.features, "Comma list of mfcc, prosody, ssrl")->capture_default_str();
  c_extract->add_option("--encoder", extract.encoder, "SSRL encoder checkpoint");
  c_extract->add_option("--config", extract.config, "JSON run configuration");
  c_extract->add_option("--seed", extract.seed, "Seed (overrides the config)");
  c_extract->add_option("--workers", extract.workers, "Worker threads (default: cores)");

  CommonArgs pre;
  auto* c_pretrain = app.add_subcommand("pretrain", "Pretrain the SSRL encoder");
  add_common(c_pretrain, pre);

  CommonArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the fusion model");
  add_common(c_train, tr);
  c_train->add_option("--encoder", tr.encoder, "SSRL encoder checkpoint");
  c_train->add_option("--val-manifest", tr.val_manifest, "Validation manifest for model selection");

  CommonArgs ft;
  std::string source_ckpt, subset;
  bool freeze = false;
  auto* c_finetune = app.add_subcommand("finetune", "Fine-tune a trained model on a target corpus");
  add_common(c_finetune, ft);
  c_finetune->add_option("--source-ckpt", source_ckpt, "Source model checkpoint")->required();
  c_finetune->add_option("--subset", subset, "all | speakers:F | utterances:F");
  c_finetune->add_option("--encoder", ft.encoder, "SSRL encoder checkpoint");
  c_finetune->add_option("--val-manifest", ft.val_manifest, "Validation manifest");
  c_finetune->add_flag("--freeze-branches", freeze, "Keep the feature branches fixed");

  CommonArgs ev;
  std::string ckpt;
  auto* c_evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_common(c_evaluate, ev);
  c_evaluate->add_option("--ckpt", ckpt, "Model checkpoint")->required();
  c_evaluate->add_option("--encoder", ev.encoder, "SSRL encoder checkpoint");

  CommonArgs kf;
  std::size_t folds = 10;
  auto* c_kfold = app.add_subcommand("kfold", "Speaker-disjoint k-fold cross-validation");
  add_common(c_kfold, kf);
  c_kfold->add_option("--folds", folds, "Number of folds")->capture_default_str();
  c_kfold->add_option("--encoder", kf.encoder, "SSRL encoder checkpoint");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  LogSink previous;
  if (verbose) {
    previous = set_log_sink([&err](LogLevel level, std::string_view msg) {
      err << (level == LogLevel::kWarning ? "warning: " : "") << msg << "\n";
    });
  }
  int code = kExitOk;
  try {
    if (*c_synth) code = cmd_synth(synth, out);
    if (*c_extract) code = cmd_extract(extract, out, err);
    if (*c_pretrain) code = cmd_pretrain(pre, out);
    if (*c_train) code = cmd_train(tr, out);
    if (*c_finetune) code = cmd_finetune(ft, source_ckpt, subset, freeze, out);
    if (*c_evaluate) code = cmd_evaluate(ev, ckpt, out);
    if (*c_kfold) code = cmd_kfold(kf, folds, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = kExitFailure;
  }
  if (verbose) set_log_sink(previous);
  return code;
}

}  // namespace emofuse::cli
