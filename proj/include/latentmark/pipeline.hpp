#pragma once

// File-based experiment pipeline: configuration, stages, manifests and the
// final report.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentmark/codec.hpp"
#include "latentmark/corpus.hpp"
#include "latentmark/eval.hpp"
#include "latentmark/lm.hpp"
#include "latentmark/watermark.hpp"

namespace latentmark {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  // corpus
  std::int64_t seed = 1;
  int n_train = 200;
  int n_test = 1000;
  double duration_s = 10.0;
  int sample_rate = 16000;
  std::int64_t finetune_seed = 1001;
  int finetune_n_signals = 200;
  double finetune_f0_lo_hz = 300.0;
  double finetune_f0_hi_hz = 2400.0;

  // watermark
  std::int64_t key_seed = 42;
  int wm_frame_len = 320;
  int wm_hop = 320;
  int band_lo = 8;
  int band_hi = 56;
  double tpr_min = 0.95;
  double fpr_max = 0.01;
  double snr_floor_db = 10.0;
  double channel_auc_min = 0.98;  // codec survival of marked vs clean, both roundtripped
  double alpha_lo = 0.005;
  double alpha_hi = 0.16;
  int alpha_points = 16;
  double gain = 12.0;
  bool sync_search = false;

  // codec
  int frame_rate = 50;
  int n_codebooks = 4;
  int codebook_size = 256;
  int kept_coeffs = 64;
  int kmeans_iters = 25;
  std::int64_t codec_seed = 7;
  std::int64_t requant_seed = 8;

  // lm
  std::vector<int> delays{0, 1, 2, 4};
  double delta = 0.1;
  double c_min = 2.0;
  int top_k = 50;
  double temperature = 1.0;
  int n_frames = 500;
  int n_generations = 500;
  std::int64_t lm_seed = 100;

  // eval
  std::vector<double> fpr_targets{1e-2, 1e-3};
  int n_localization = 200;
  double localization_tau = 0.5;
  double coverage_lo = 0.3;
  double coverage_hi = 0.7;
  std::vector<std::string> edits{"white_noise", "pink_noise", "lowpass", "highpass", "resample", "echo", "requant"};
  double white_snr_db = 20.0;
  double pink_snr_db = 20.0;
  double lowpass_cutoff = 0.25;
  double highpass_cutoff = 0.05;
  double resample_fraction = 0.75;
  double echo_delay_s = 0.1;
  double echo_decay = 0.3;
  int n_fad_reference = 500;

  // attack
  std::vector<double> finetune_weights{0.0, 0.25, 0.5, 1.0, 2.0, 4.0};
  bool alt_decoder = true;

  CorpusSpec corpus_spec(Partition p) const {
    CorpusSpec s;
    s.seed = seed;
    s.n_signals = p == Partition::train ? n_train : n_test;
    s.duration_s = duration_s;
    s.sample_rate = sample_rate;
    s.partition = p;
    return s;
  }

  /// Clean corpus for the purification attack: same generator, shifted timbre.
  CorpusSpec finetune_spec() const {
    CorpusSpec s = corpus_spec(Partition::train);
    s.seed = finetune_seed;
    s.n_signals = finetune_n_signals;
    s.f0_lo_hz = finetune_f0_lo_hz;
    s.f0_hi_hz = finetune_f0_hi_hz;
    return s;
  }

  KeyConfig key_config() const { return {wm_frame_len, wm_hop, band_lo, band_hi}; }
  CalibrationTargets targets() const { return {tpr_min, fpr_max, snr_floor_db, channel_auc_min}; }

  CodecConfig codec_config(std::int64_t codec_seed_value) const {
    CodecConfig c;
    c.sample_rate = sample_rate;
    c.frame_rate = frame_rate;
    c.n_codebooks = n_codebooks;
    c.codebook_size = codebook_size;
    c.kept_coeffs = kept_coeffs;
    c.kmeans_iters = kmeans_iters;
    c.seed = codec_seed_value;
    return c;
  }

  ModelShape model_shape() const { return {n_codebooks, codebook_size, delays}; }
  SamplingConfig sampling() const { return {top_k, temperature}; }

  EditSpec edit_spec(EditKind kind) const {
    EditSpec e;
    e.kind = kind;
    e.snr_db = kind == EditKind::pink_noise ? pink_snr_db : white_snr_db;
    e.cutoff_fraction = kind == EditKind::highpass ? highpass_cutoff : lowpass_cutoff;
    e.rate_fraction = resample_fraction;
    e.delay_s = echo_delay_s;
    e.decay = echo_decay;
    return e;
  }

  /// Range checks; every failure is a ConfigError naming the key.
  void validate() const;
};

namespace detail {

template <typename T>
bool json_is(const Json& j) {
  if constexpr (std::is_same_v<T, bool>) return j.is_boolean();
  else if constexpr (std::is_integral_v<T>) return j.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) return j.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return j.is_string();
  else {
    if (!j.is_array()) return false;
    for (const auto& e : j)
      if (!json_is<typename T::value_type>(e)) return false;
    return true;
  }
}

template <typename T>
const char* json_type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "an array";
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

struct ConfigField {
  std::string name;
  std::function<Json(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const Json&)> set;
};

template <typename T>
ConfigField config_field(std::string name, T PipelineConfig::*member) {
  ConfigField f;
  f.name = name;
  f.get = [member](const PipelineConfig& c) { return Json(c.*member); };
  f.set = [member, name](PipelineConfig& c, const Json& j) {
    if (!detail::json_is<T>(j))
      throw ConfigError("config key '" + name + "' expects " + detail::json_type_name<T>() + ", got " + j.dump());
    c.*member = j.get<T>();
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  using C = PipelineConfig;
  static const std::vector<ConfigField> fields{
      config_field("corpus.seed", &C::seed),
      config_field("corpus.n_train", &C::n_train),
      config_field("corpus.n_test", &C::n_test),
      config_field("corpus.duration_s", &C::duration_s),
      config_field("corpus.sample_rate", &C::sample_rate),
      config_field("corpus.finetune_seed", &C::finetune_seed),
      config_field("corpus.finetune_n_signals", &C::finetune_n_signals),
      config_field("corpus.finetune_f0_lo_hz", &C::finetune_f0_lo_hz),
      config_field("corpus.finetune_f0_hi_hz", &C::finetune_f0_hi_hz),
      config_field("watermark.key_seed", &C::key_seed),
      config_field("watermark.frame_len", &C::wm_frame_len),
      config_field("watermark.hop", &C::wm_hop),
      config_field("watermark.band_lo", &C::band_lo),
      config_field("watermark.band_hi", &C::band_hi),
      config_field("watermark.tpr_min", &C::tpr_min),
      config_field("watermark.fpr_max", &C::fpr_max),
      config_field("watermark.snr_floor_db", &C::snr_floor_db),
      config_field("watermark.channel_auc_min", &C::channel_auc_min),
      config_field("watermark.alpha_lo", &C::alpha_lo),
      config_field("watermark.alpha_hi", &C::alpha_hi),
      config_field("watermark.alpha_points", &C::alpha_points),
      config_field("watermark.gain", &C::gain),
      config_field("watermark.sync_search", &C::sync_search),
      config_field("codec.frame_rate", &C::frame_rate),
      config_field("codec.n_codebooks", &C::n_codebooks),
      config_field("codec.codebook_size", &C::codebook_size),
      config_field("codec.kept_coeffs", &C::kept_coeffs),
      config_field("codec.kmeans_iters", &C::kmeans_iters),
      config_field("codec.seed", &C::codec_seed),
      config_field("codec.requant_seed", &C::requant_seed),
      config_field("lm.delays", &C::delays),
      config_field("lm.delta", &C::delta),
      config_field("lm.c_min", &C::c_min),
      config_field("lm.top_k", &C::top_k),
      config_field("lm.temperature", &C::temperature),
      config_field("lm.n_frames", &C::n_frames),
      config_field("lm.n_generations", &C::n_generations),
      config_field("lm.seed", &C::lm_seed),
      config_field("eval.fpr_targets", &C::fpr_targets),
      config_field("eval.n_localization", &C::n_localization),
      config_field("eval.localization_tau", &C::localization_tau),
      config_field("eval.coverage_lo", &C::coverage_lo),
      config_field("eval.coverage_hi", &C::coverage_hi),
      config_field("eval.edits", &C::edits),
      config_field("eval.white_snr_db", &C::white_snr_db),
      config_field("eval.pink_snr_db", &C::pink_snr_db),
      config_field("eval.lowpass_cutoff", &C::lowpass_cutoff),
      config_field("eval.highpass_cutoff", &C::highpass_cutoff),
      config_field("eval.resample_fraction", &C::resample_fraction),
      config_field("eval.echo_delay_s", &C::echo_delay_s),
      config_field("eval.echo_decay", &C::echo_decay),
      config_field("eval.n_fad_reference", &C::n_fad_reference),
      config_field("attack.finetune_weights", &C::finetune_weights),
      config_field("attack.alt_decoder", &C::alt_decoder),
  };
  return fields;
}

/// Set one key; unknown keys are rejected with the closest valid name.
inline void set_config_key(PipelineConfig& c, const std::string& key, const Json& value) {
  const ConfigField* best = nullptr;
  std::size_t best_d = std::string::npos;
  for (const auto& f : config_fields()) {
    if (f.name == key) {
      f.set(c, value);
      return;
    }
    // Compare against the full name and the part after the section prefix.
    const std::string leaf = f.name.substr(f.name.find('.') + 1);
    const std::size_t d = std::min(detail::edit_distance(key, f.name), detail::edit_distance(key, leaf));
    if (d < best_d) {
      best_d = d;
      best = &f;
    }
  }
  throw ConfigError("unknown config key '" + key + "'" + (best ? "; did you mean '" + best->name + "'?" : ""));
}

inline Json config_to_json(const PipelineConfig& c) {
  Json inner = Json::object();
  for (const auto& f : config_fields()) inner[f.name] = f.get(c);
  return Json{{"pipeline", inner}};
}

inline PipelineConfig config_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("pipeline") || !j["pipeline"].is_object())
    throw ConfigError("config must be a JSON object with a \"pipeline\" object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "pipeline") throw ConfigError("unknown top-level config key '" + it.key() + "'; expected 'pipeline'");
  PipelineConfig c;
  for (auto it = j["pipeline"].begin(); it != j["pipeline"].end(); ++it) set_config_key(c, it.key(), it.value());
  return c;
}

/// Apply "key=value" (leading dashes allowed); the value is parsed as JSON and
/// falls back to a plain string.
inline void apply_override(PipelineConfig& c, std::string arg) {
  while (!arg.empty() && arg.front() == '-') arg.erase(arg.begin());
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + arg + "' must look like --key=value");
  const std::string key = arg.substr(0, eq), text = arg.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_config_key(c, key, value);
}

inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  const Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  PipelineConfig c = config_from_json(j);
  for (const auto& o : overrides) apply_override(c, o);
  c.validate();
  return c;
}

inline void PipelineConfig::validate() const {
  auto check = [](bool ok, const std::string& key, const std::string& rule) {
    if (!ok) throw ConfigError("config key '" + key + "' " + rule);
  };
  check(n_train >= 2, "corpus.n_train", "must be >= 2");
  check(n_test >= 1, "corpus.n_test", "must be >= 1");
  check(finetune_n_signals >= 1, "corpus.finetune_n_signals", "must be >= 1");
  check(tpr_min >= 0.0, "watermark.tpr_min", "must be >= 0");
  check(fpr_max >= 0.0 && fpr_max <= 1.0, "watermark.fpr_max", "must be in [0, 1]");
  check(channel_auc_min >= 0.0 && channel_auc_min <= 1.0, "watermark.channel_auc_min", "must be in [0, 1]");
  check(alpha_points >= 1, "watermark.alpha_points", "must be >= 1");
  check(alpha_lo > 0.0 && alpha_hi >= alpha_lo, "watermark.alpha_lo", "must satisfy 0 < alpha_lo <= alpha_hi");
  check(gain > 0.0, "watermark.gain", "must be > 0");
  check(n_frames >= 1, "lm.n_frames", "must be >= 1");
  check(n_generations >= 2, "lm.n_generations", "must be >= 2");
  check(delta >= 0.0, "lm.delta", "must be >= 0");
  check(c_min >= 0.0, "lm.c_min", "must be >= 0");
  check(!fpr_targets.empty(), "eval.fpr_targets", "must not be empty");
  for (double f : fpr_targets) check(f > 0.0 && f < 1.0, "eval.fpr_targets", "entries must be in (0, 1)");
  check(n_localization >= 1, "eval.n_localization", "must be >= 1");
  check(localization_tau >= 0.0 && localization_tau <= 1.0, "eval.localization_tau", "must be in [0, 1]");
  check(0.0 <= coverage_lo && coverage_lo <= coverage_hi && coverage_hi <= 1.0, "eval.coverage_lo",
        "must satisfy 0 <= coverage_lo <= coverage_hi <= 1");
  check(n_fad_reference >= 1, "eval.n_fad_reference", "must be >= 1");
  for (double w : finetune_weights) check(w >= 0.0, "attack.finetune_weights", "entries must be >= 0");
  try {
    corpus_spec(Partition::train).validate();
    finetune_spec().validate();
    make_key(key_seed, key_config());
    codec_config(codec_seed).validate();
    model_shape().validate();
    sampling().validate();
    for (const auto& e : edits) {
      EditSpec spec = edit_spec(edit_kind_from_string(e));
      Codec placeholder;
      spec.codec = &placeholder;
      spec.validate();
    }
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  check(model_shape().delays.size() == std::size_t(n_codebooks), "lm.delays", "must have one entry per codebook");
  check(wm_frame_len <= int(corpus_spec(Partition::train).length()), "watermark.frame_len",
        "must not exceed the signal length");
}

// ---------------------------------------------------------------------------
// Watermarker serialization

inline Json watermarker_to_json(const CalibratedWatermarker& wm) {
  const auto& k = wm.key.config();
  return Json{{"seed", wm.key.seed()},     {"frame_len", k.frame_len}, {"hop", k.hop},
              {"band_lo", k.band_lo},      {"band_hi", k.band_hi},     {"alpha", wm.alpha},
              {"tau", wm.tau},             {"g", wm.map.gain},         {"b", wm.map.bias},
              {"snr_floor_db", wm.snr_floor_db}};
}

inline CalibratedWatermarker watermarker_from_json(const Json& j) {
  try {
    CalibratedWatermarker wm;
    KeyConfig k{j.at("frame_len").get<int>(), j.at("hop").get<int>(), j.at("band_lo").get<int>(),
                j.at("band_hi").get<int>()};
    wm.key = make_key(j.at("seed").get<std::int64_t>(), k);
    wm.alpha = j.at("alpha").get<double>();
    wm.tau = j.at("tau").get<double>();
    wm.map = LogisticMap{j.at("g").get<double>(), j.at("b").get<double>()};
    wm.snr_floor_db = j.at("snr_floor_db").get<double>();
    return wm;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("watermarker json: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Report helpers

/// "1e-2" style key for a power-of-ten FPR target, %g otherwise.
inline std::string fpr_key(double f) {
  const double e = std::log10(f);
  if (std::abs(e - std::round(e)) < 1e-9) return "1e" + std::to_string(int(std::round(e)));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

inline Json detection_json(const DetectionReport& r) {
  Json tpr = Json::object();
  for (const auto& [f, t] : r.tpr_at) tpr[fpr_key(f)] = t;
  return Json{{"auc", r.auc}, {"best_acc", r.best_acc}, {"best_tau", r.best_tau},
              {"tpr_at", tpr}, {"n_pos", r.n_pos},     {"n_neg", r.n_neg}};
}

/// Schema check of report.json; returns the list of problems.
inline std::vector<std::string> validate_report(const Json& r) {
  std::vector<std::string> problems;
  auto number = [&](const Json& obj, const std::string& key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key) || !obj[key].is_number()) problems.push_back(where + key + " missing or not a number");
  };
  for (const char* k : {"auc", "best_acc", "best_tau", "iou", "sl_acc", "fad"}) number(r, k, "");
  if (!r.contains("tpr_at") || !r["tpr_at"].is_object()) problems.push_back("tpr_at missing");
  else
    for (const char* k : {"1e-2", "1e-3"}) number(r["tpr_at"], k, "tpr_at.");
  if (!r.contains("edits") || !r["edits"].is_object()) problems.push_back("edits missing");
  else
    for (auto it = r["edits"].begin(); it != r["edits"].end(); ++it)
      for (const char* k : {"auc", "best_acc", "tpr", "fpr"}) number(it.value(), k, "edits." + it.key() + ".");
  for (const char* t : {"attack_finetune", "attack_decoder"})
    if (!r.contains(t) || !r[t].is_array()) problems.push_back(std::string(t) + " missing");
  return problems;
}

// ---------------------------------------------------------------------------
// Pipeline

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string numbered(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d%s", i, ext);
  return buf;
}

class Pipeline {
 public:
  Pipeline(PipelineConfig config, fs::path out, std::ostream* log = &std::clog)
      : cfg_(std::move(config)), out_(std::move(out)), log_(log) {
    cfg_.validate();
  }

  static const std::vector<std::string>& stages() {
    static const std::vector<std::string> names{
        "gen-corpus",   "train-codec",     "calibrate-wm",      "mark-corpus",     "tokenize",
        "train-lm",     "generate",        "eval-detection",    "eval-localization", "eval-robustness",
        "attack-decoder", "attack-finetune", "report"};
    return names;
  }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& out() const { return out_; }

  /// Run one stage, or every stage in order for "all". A stage whose config,
  /// inputs and outputs are unchanged since its last run is skipped.
  void run(const std::string& stage) {
    if (stage == "all") {
      for (const auto& s : stages()) run(s);
      return;
    }
    const auto& defs = definitions();
    const auto it = defs.find(stage);
    if (it == defs.end()) throw ConfigError("unknown stage '" + stage + "'");
    const StageDef& def = it->second;

    const std::vector<fs::path> inputs = def.inputs(*this);
    Json in = Json::array();
    std::string fp = config_to_json(cfg_).dump() + "\n" + stage;
    for (const auto& rel : inputs) {
      const fs::path p = out_ / rel;
      if (!fs::exists(p))
        throw DependencyError("stage '" + stage + "' needs " + p.string() + " (produced by stage '" +
                              producer(rel) + "')");
      const std::string h = fnv1a_hex(read_file(p));
      in.push_back({{"path", rel.generic_string()}, {"hash", h}});
      fp += "\n" + rel.generic_string() + ":" + h;
    }
    const std::string fingerprint = fnv1a_hex(fp);
    const fs::path record = out_ / "stages" / (stage + ".json");
    if (up_to_date(record, fingerprint)) {
      log("[" + stage + "] up to date");
      return;
    }
    log("[" + stage + "] running");
    const std::vector<fs::path> outputs = def.run(*this);
    Json outj = Json::array();
    for (const auto& rel : outputs)
      outj.push_back({{"path", rel.generic_string()}, {"hash", fnv1a_hex(read_file(out_ / rel))}});
    const Json rec{{"stage", stage},   {"fingerprint", fingerprint}, {"config", config_to_json(cfg_)},
                   {"inputs", in},     {"outputs", outj}};
    write_file_atomic(out_ / "config.json", config_to_json(cfg_).dump(2) + "\n");
    write_file_atomic(record, rec.dump(2) + "\n");
  }

  // --- artifact locations (relative to the output directory) ---
  static fs::path train_wav(int i) { return fs::path("corpus/train") / numbered(i, ".wav"); }
  static fs::path test_wav(int i) { return fs::path("corpus/test") / numbered(i, ".wav"); }
  static fs::path finetune_wav(int i) { return fs::path("corpus/finetune") / numbered(i, ".wav"); }
  static fs::path marked_wav(int i) { return fs::path("marked/train") / numbered(i, ".wav"); }
  static fs::path tokens_path(const char* set, int i) { return fs::path("tokens") / set / numbered(i, ".tok"); }
  static fs::path generation_path(int i) { return fs::path("generations") / numbered(i, ".tok"); }

  std::uint64_t generation_seed(int i) const { return std::uint64_t(cfg_.lm_seed) * 1000003ull + std::uint64_t(i); }

 private:
  struct StageDef {
    std::function<std::vector<fs::path>(const Pipeline&)> inputs;
    std::function<std::vector<fs::path>(Pipeline&)> run;
  };

  void log(const std::string& msg) const {
    if (log_) *log_ << msg << std::endl;
  }

  bool up_to_date(const fs::path& record, const std::string& fingerprint) const {
    if (!fs::exists(record)) return false;
    const Json rec = Json::parse(read_file(record), nullptr, false);
    if (rec.is_discarded() || rec.value("fingerprint", "") != fingerprint) return false;
    for (const auto& o : rec["outputs"]) {
      const fs::path p = out_ / o["path"].get<std::string>();
      if (!fs::exists(p) || fnv1a_hex(read_file(p)) != o["hash"].get<std::string>()) return false;
    }
    return true;
  }

  static std::string producer(const fs::path& rel) {
    const std::string top = rel.begin()->string();
    static const std::map<std::string, std::string> by_dir{
        {"corpus", "gen-corpus"},   {"codec", "train-codec"},  {"watermark", "calibrate-wm"},
        {"marked", "mark-corpus"},  {"tokens", "tokenize"},    {"lm", "train-lm"},
        {"generations", "generate"}, {"attack", "attack-*"},   {"eval", "eval-*"}};
    const auto it = by_dir.find(top);
    return it == by_dir.end() ? "?" : it->second;
  }

  // --- I/O helpers ---
  std::vector<Signal> load_wavs(fs::path (*path)(int), int n) const {
    std::vector<Signal> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(read_wav(out_ / path(i)));
    return out;
  }

  std::vector<TokenGrid> load_grids(const char* set, int n) const {
    std::vector<TokenGrid> out;
    for (int i = 0; i < n; ++i) out.push_back(load_tokens(out_ / tokens_path(set, i)));
    return out;
  }

  std::vector<TokenGrid> load_generations() const {
    std::vector<TokenGrid> out;
    for (int i = 0; i < cfg_.n_generations; ++i) out.push_back(load_tokens(out_ / generation_path(i)));
    return out;
  }

  std::vector<DelayedGrid> delayed(const std::vector<TokenGrid>& grids) const {
    std::vector<DelayedGrid> out;
    out.reserve(grids.size());
    for (const auto& g : grids) out.push_back(apply_delay(g, cfg_.delays));
    return out;
  }

  CalibratedWatermarker load_watermarker() const {
    return watermarker_from_json(Json::parse(read_file(out_ / "watermark/watermarker.json")));
  }

  fs::path write_json(const fs::path& rel, const Json& j) const {
    write_file_atomic(out_ / rel, j.dump(2) + "\n");
    return rel;
  }

  std::vector<double> scores(const std::vector<Signal>& signals, const CalibratedWatermarker& wm) const {
    std::vector<double> s;
    s.reserve(signals.size());
    for (const auto& x : signals) s.push_back(score_global(detect(x, wm, cfg_.sync_search)));
    return s;
  }

  std::vector<Signal> decode_all(const std::vector<TokenGrid>& grids, const Codec& codec,
                                 const AltDecoder* alt = nullptr) const {
    std::vector<Signal> out;
    out.reserve(grids.size());
    for (const auto& g : grids) out.push_back(alt ? decode_alt(g, codec, *alt) : decode(g, codec));
    return out;
  }

  std::vector<TokenGrid> generate_all(const SequenceModel& model) const {
    std::vector<TokenGrid> out;
    for (int i = 0; i < cfg_.n_generations; ++i)
      out.push_back(sample_lm(model, cfg_.n_frames, cfg_.sampling(), generation_seed(i)));
    return out;
  }

  std::vector<Signal> fad_reference() const {
    return load_wavs(&Pipeline::test_wav, std::min(cfg_.n_fad_reference, cfg_.n_test));
  }

  /// TPR and FPR at the calibrated threshold plus the ROC summary.
  Json operating_point(const std::vector<double>& pos, const std::vector<double>& neg, double tau) const {
    const DetectionReport r = roc(pos, neg, cfg_.fpr_targets);
    Json j = detection_json(r);
    j["tpr"] = rate_above(pos, tau);
    j["fpr"] = rate_above(neg, tau);
    return j;
  }

  std::vector<fs::path> range_paths(fs::path (*path)(int), int n) const {
    std::vector<fs::path> out;
    for (int i = 0; i < n; ++i) out.push_back(path(i));
    return out;
  }

  std::vector<fs::path> token_paths(const char* set, int n) const {
    std::vector<fs::path> out;
    for (int i = 0; i < n; ++i) out.push_back(tokens_path(set, i));
    return out;
  }

  static std::vector<fs::path> concat(std::initializer_list<std::vector<fs::path>> parts) {
    std::vector<fs::path> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
  }

  // --- stages ---
  std::vector<fs::path> stage_gen_corpus() {
    std::vector<fs::path> outs;
    Json manifest = Json::array();
    auto emit = [&](const CorpusSpec& spec, fs::path (*path)(int)) {
      for (int i = 0; i < spec.n_signals; ++i) {
        write_wav(synthesize_one(spec, i), out_ / path(i));
        outs.push_back(path(i));
        manifest.push_back({{"path", path(i).generic_string()},
                            {"partition", to_string(spec.partition)},
                            {"seed", spec.seed},
                            {"duration_s", spec.duration_s}});
      }
    };
    emit(cfg_.corpus_spec(Partition::train), &Pipeline::train_wav);
    emit(cfg_.corpus_spec(Partition::test), &Pipeline::test_wav);
    emit(cfg_.finetune_spec(), &Pipeline::finetune_wav);
    outs.push_back(write_json("corpus/manifest.json", manifest));
    return outs;
  }

  std::vector<fs::path> stage_train_codec() {
    const auto train = load_wavs(&Pipeline::train_wav, cfg_.n_train);
    const Codec codec = train_rvq(train, cfg_.codec_config(cfg_.codec_seed));
    const Codec requant = train_rvq(train, cfg_.codec_config(cfg_.requant_seed));
    save_codec(codec, out_ / "codec/codec.rvq");
    save_codec(requant, out_ / "codec/requant.rvq");
    const Json info{{"bitrate_bps", codec.config.bitrate_bps()},
                    {"stage_mse", codec.stage_mse},
                    {"requant_stage_mse", requant.stage_mse}};
    return {"codec/codec.rvq", "codec/requant.rvq", write_json("codec/codec.json", info)};
  }

  std::vector<fs::path> stage_calibrate() {
    // First half of the train partition carries the SNR constraint, the second
    // half is the detection holdout; the test partition is never touched.
    const auto train = load_wavs(&Pipeline::train_wav, cfg_.n_train);
    const auto half = train.size() / 2;
    const std::span<const Signal> snr_set(train.data(), half), holdout(train.data() + half, train.size() - half);
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const auto key = make_key(cfg_.key_seed, cfg_.key_config());
    const auto grid = alpha_grid(cfg_.alpha_lo, cfg_.alpha_hi, cfg_.alpha_points);
    Json sweep = Json::array();
    const CalibrationResult res = calibrate(snr_set, holdout, key, codec, cfg_.targets(), grid, cfg_.gain);
    for (const auto& p : res.sweep)
      sweep.push_back({{"alpha", p.alpha}, {"tpr", p.tpr}, {"fpr", p.fpr}, {"min_snr_db", p.min_snr_db},
                       {"rho0", p.rho0}, {"tau", p.tau}, {"channel_auc", p.channel_auc},
                       {"feasible", p.feasible}});
    return {write_json("watermark/watermarker.json", watermarker_to_json(res.watermarker)),
            write_json("watermark/calibration.json", sweep)};
  }

  std::vector<fs::path> stage_mark_corpus() {
    const auto wm = load_watermarker();
    std::vector<fs::path> outs;
    std::size_t clamped = 0;
    for (int i = 0; i < cfg_.n_train; ++i) {
      const EmbedResult r = embed(read_wav(out_ / train_wav(i)), wm);
      clamped += r.clamped;
      write_wav(r.marked, out_ / marked_wav(i));
      outs.push_back(marked_wav(i));
    }
    outs.push_back(write_json("marked/summary.json", Json{{"alpha", wm.alpha}, {"clamped_samples", clamped}}));
    return outs;
  }

  std::vector<fs::path> stage_tokenize() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    std::vector<fs::path> outs;
    auto run = [&](const char* set, fs::path (*src)(int), int n) {
      for (int i = 0; i < n; ++i) {
        save_tokens(encode(read_wav(out_ / src(i)), codec), out_ / tokens_path(set, i));
        outs.push_back(tokens_path(set, i));
      }
    };
    run("marked", &Pipeline::marked_wav, cfg_.n_train);
    run("clean", &Pipeline::train_wav, cfg_.n_train);
    run("test", &Pipeline::test_wav, cfg_.n_test);
    run("finetune", &Pipeline::finetune_wav, cfg_.finetune_n_signals);
    // Fraction of tokens the watermark changes.
    std::size_t changed = 0, total = 0;
    for (int i = 0; i < cfg_.n_train; ++i) {
      const auto a = load_tokens(out_ / tokens_path("marked", i)), b = load_tokens(out_ / tokens_path("clean", i));
      for (std::size_t t = 0; t < a.tokens.size(); ++t) changed += a.tokens[t] != b.tokens[t];
      total += a.tokens.size();
    }
    outs.push_back(write_json("tokens/summary.json",
                              Json{{"token_divergence", total ? double(changed) / double(total) : 0.0}}));
    return outs;
  }

  std::vector<fs::path> stage_train_lm() {
    const auto grids = delayed(load_grids("marked", cfg_.n_train));
    const SequenceModel model = train_lm(grids, cfg_.model_shape(), cfg_.delta, cfg_.c_min);
    save_model(model, out_ / "lm/model.slm");
    return {"lm/model.slm"};
  }

  std::vector<fs::path> stage_generate() {
    const SequenceModel model = load_model(out_ / "lm/model.slm");
    std::vector<fs::path> outs;
    for (int i = 0; i < cfg_.n_generations; ++i) {
      save_tokens(sample_lm(model, cfg_.n_frames, cfg_.sampling(), generation_seed(i)), out_ / generation_path(i));
      outs.push_back(generation_path(i));
    }
    return outs;
  }

  std::vector<fs::path> stage_eval_detection() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const auto wm = load_watermarker();
    const auto gens = decode_all(load_generations(), codec);
    const auto negs = decode_all(load_grids("test", cfg_.n_test), codec);
    const auto pos = scores(gens, wm), neg = scores(negs, wm);
    Json j = operating_point(pos, neg, wm.tau);
    j["tau"] = wm.tau;
    j["fad"] = fad_proxy(fad_reference(), gens);
    return {write_json("eval/detection.json", j),
            write_json("eval/scores.json", Json{{"positive", pos}, {"negative", neg}})};
  }

  std::vector<fs::path> stage_eval_localization() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const auto wm = load_watermarker();
    std::vector<LocalizationSample> samples;
    double coverage = 0.0;
    for (int i = 0; i < cfg_.n_localization; ++i) {
      const Signal gen = decode(load_tokens(out_ / generation_path(i % cfg_.n_generations)), codec);
      Signal clean = read_wav(out_ / test_wav(i % cfg_.n_test));
      clean.samples.resize(gen.size(), 0.0f);
      Rng rng = make_rng(std::uint64_t(cfg_.seed), 0x4C4F43u, std::uint64_t(i));
      const double keep = uniform(rng, cfg_.coverage_lo, cfg_.coverage_hi);
      const auto replaced = std::size_t(std::llround((1.0 - keep) * double(gen.size())));
      const auto start = std::size_t(uniform_int(rng, 0, std::int64_t(gen.size() - replaced)));
      Augmented a = replace_interval(gen, clean, start, replaced);
      double m = 0.0;
      for (auto v : a.mask) m += v;
      coverage += m / double(a.mask.size());
      samples.push_back({std::move(a.signal), std::move(a.mask)});
    }
    const auto r = localization_eval(samples, wm, cfg_.localization_tau, false);
    return {write_json("eval/localization.json", Json{{"iou", r.iou},
                                                     {"sl_acc", r.sl_acc},
                                                     {"tau", cfg_.localization_tau},
                                                     {"n", samples.size()},
                                                     {"mean_coverage", coverage / double(samples.size())}})};
  }

  std::vector<fs::path> stage_eval_robustness() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const Codec requant = load_codec(out_ / "codec/requant.rvq");
    const auto wm = load_watermarker();
    const auto gens = decode_all(load_generations(), codec);
    const auto negs = decode_all(load_grids("test", cfg_.n_test), codec);
    Json edits = Json::object();
    for (const auto& name : cfg_.edits) {
      EditSpec spec = cfg_.edit_spec(edit_kind_from_string(name));
      spec.codec = &requant;
      auto edited = [&](const std::vector<Signal>& xs, std::uint64_t salt) {
        std::vector<Signal> out;
        out.reserve(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) {
          spec.seed = std::uint64_t(cfg_.seed) * 0x9E3779B97F4A7C15ull ^ (salt << 32 | i);
          out.push_back(apply_edit(xs[i], spec));
        }
        return out;
      };
      const auto pos = scores(edited(gens, 1), wm), neg = scores(edited(negs, 2), wm);
      const Json op = operating_point(pos, neg, wm.tau);
      edits[name] = Json{{"auc", op["auc"]}, {"best_acc", op["best_acc"]}, {"tpr", op["tpr"]}, {"fpr", op["fpr"]},
                         {"tpr_at", op["tpr_at"]}};
      log("  " + name + ": auc " + std::to_string(op["auc"].get<double>()));
    }
    return {write_json("eval/robustness.json", edits)};
  }

  std::vector<fs::path> stage_attack_decoder() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const auto wm = load_watermarker();
    const auto gen_tokens = load_generations();
    const auto test_tokens = load_grids("test", cfg_.n_test);
    Json rows = Json::array();
    auto row = [&](const std::string& name, const AltDecoder* alt) {
      const auto pos = scores(decode_all(gen_tokens, codec, alt), wm);
      const auto neg = scores(decode_all(test_tokens, codec, alt), wm);
      const Json op = operating_point(pos, neg, wm.tau);
      rows.push_back(Json{{"decoder", name}, {"auc", op["auc"]}, {"best_acc", op["best_acc"]}, {"tpr", op["tpr"]},
                          {"fpr", op["fpr"]}});
    };
    row("default", nullptr);
    Json fit = Json::object();
    if (cfg_.alt_decoder) {
      const AltDecoder alt = train_alt_decoder(codec, load_wavs(&Pipeline::train_wav, cfg_.n_train));
      fit = Json{{"fit_mse", alt.fit_mse}, {"raw_mse", alt.raw_mse}};
      row("alt", &alt);
    }
    Json token_hashes = Json::array();
    for (int i = 0; i < cfg_.n_generations; ++i) token_hashes.push_back(fnv1a_hex(read_file(out_ / generation_path(i))));
    return {write_json("attack/decoder.json",
                       Json{{"rows", rows}, {"alt_fit", fit}, {"generation_token_hashes", token_hashes}})};
  }

  std::vector<fs::path> stage_attack_finetune() {
    const Codec codec = load_codec(out_ / "codec/codec.rvq");
    const auto wm = load_watermarker();
    const SequenceModel model = load_model(out_ / "lm/model.slm");
    const SequenceModel clean = train_lm(delayed(load_grids("finetune", cfg_.finetune_n_signals)),
                                         cfg_.model_shape(), cfg_.delta, cfg_.c_min);
    const auto neg = scores(decode_all(load_grids("test", cfg_.n_test), codec), wm);
    const auto reference = fad_reference();
    Json rows = Json::array();
    const double strict = *std::min_element(cfg_.fpr_targets.begin(), cfg_.fpr_targets.end());
    for (double w : cfg_.finetune_weights) {
      // The weight is relative to the original training mass.
      const double scale = clean.mass() > 0.0 ? w * model.mass() / clean.mass() : 0.0;
      const SequenceModel tuned = model.mixed_with(clean, scale);
      const auto gens = decode_all(generate_all(tuned), codec);
      const auto pos = scores(gens, wm);
      const DetectionReport r = roc(pos, neg, cfg_.fpr_targets);
      rows.push_back(Json{{"model", "finetune"},
                          {"weight", w},
                          {"auc", r.auc},
                          {"best_acc", r.best_acc},
                          {"tpr_at_" + fpr_key(strict), r.tpr_at.at(strict)},
                          {"fad", fad_proxy(reference, gens)}});
      log("  weight " + std::to_string(w) + ": tpr " + std::to_string(r.tpr_at.at(strict)));
    }
    const auto scratch = decode_all(generate_all(clean), codec);
    rows.push_back(Json{{"model", "scratch"}, {"weight", nullptr}, {"fad", fad_proxy(reference, scratch)}});
    return {write_json("attack/finetune.json", rows)};
  }

  std::vector<fs::path> stage_report() {
    auto load = [&](const char* rel) { return Json::parse(read_file(out_ / rel)); };
    const Json det = load("eval/detection.json"), loc = load("eval/localization.json"),
               rob = load("eval/robustness.json"), dec = load("attack/decoder.json"), ft = load("attack/finetune.json"),
               wmj = load("watermark/watermarker.json"), codec = load("codec/codec.json"),
               tok = load("tokens/summary.json");
    Json r = Json::object();
    for (const char* k : {"auc", "best_acc", "best_tau", "tpr_at", "n_pos", "n_neg", "tau", "tpr", "fpr", "fad"})
      r[k] = det[k];
    r["iou"] = loc["iou"];
    r["sl_acc"] = loc["sl_acc"];
    r["edits"] = rob;
    r["attack_decoder"] = dec["rows"];
    r["attack_finetune"] = ft;
    r["watermarker"] = wmj;
    r["bitrate_bps"] = codec["bitrate_bps"];
    r["token_divergence"] = tok["token_divergence"];
    const auto problems = validate_report(r);
    if (!problems.empty()) throw FormatError("report.json failed schema check: " + problems.front());

    std::string csv = "experiment,edit,metric,value\n";
    auto row = [&](const std::string& exp, const std::string& edit, const std::string& metric, const Json& v) {
      if (v.is_number()) csv += exp + "," + edit + "," + metric + "," + v.dump() + "\n";
    };
    for (const char* k : {"auc", "best_acc", "tpr", "fpr", "fad", "iou", "sl_acc"}) row("detection", "none", k, r[k]);
    for (auto it = r["tpr_at"].begin(); it != r["tpr_at"].end(); ++it) row("detection", "none", "tpr_at_" + it.key(), it.value());
    for (auto it = rob.begin(); it != rob.end(); ++it)
      for (const char* k : {"auc", "best_acc", "tpr", "fpr"}) row("robustness", it.key(), k, it.value()[k]);
    for (const auto& d : dec["rows"])
      for (const char* k : {"auc", "best_acc", "tpr", "fpr"}) row("decoder_" + d["decoder"].get<std::string>(), "none", k, d[k]);
    for (const auto& f : ft) {
      const std::string exp = f["model"] == "scratch" ? std::string("finetune_scratch")
                                                      : "finetune_w" + f["weight"].dump();
      for (auto it = f.begin(); it != f.end(); ++it)
        if (it.key() != "weight") row(exp, "none", it.key(), it.value());
    }
    write_file_atomic(out_ / "metrics.csv", csv);
    return {write_json("report.json", r), "metrics.csv"};
  }

  static const std::map<std::string, StageDef>& definitions() {
    using P = Pipeline;
    static const std::map<std::string, StageDef> defs{
        {"gen-corpus", {[](const P&) { return std::vector<fs::path>{}; }, [](P& p) { return p.stage_gen_corpus(); }}},
        {"train-codec",
         {[](const P& p) { return p.range_paths(&P::train_wav, p.cfg_.n_train); },
          [](P& p) { return p.stage_train_codec(); }}},
        {"calibrate-wm",
         {[](const P& p) {
            return concat({p.range_paths(&P::train_wav, p.cfg_.n_train), {"codec/codec.rvq"}});
          },
          [](P& p) { return p.stage_calibrate(); }}},
        {"mark-corpus",
         {[](const P& p) {
            return concat({p.range_paths(&P::train_wav, p.cfg_.n_train), {"watermark/watermarker.json"}});
          },
          [](P& p) { return p.stage_mark_corpus(); }}},
        {"tokenize",
         {[](const P& p) {
            return concat({{"codec/codec.rvq"}, p.range_paths(&P::marked_wav, p.cfg_.n_train),
                           p.range_paths(&P::train_wav, p.cfg_.n_train), p.range_paths(&P::test_wav, p.cfg_.n_test),
                           p.range_paths(&P::finetune_wav, p.cfg_.finetune_n_signals)});
          },
          [](P& p) { return p.stage_tokenize(); }}},
        {"train-lm",
         {[](const P& p) { return p.token_paths("marked", p.cfg_.n_train); }, [](P& p) { return p.stage_train_lm(); }}},
        {"generate", {[](const P&) { return std::vector<fs::path>{"lm/model.slm"}; }, [](P& p) { return p.stage_generate(); }}},
        {"eval-detection",
         {[](const P& p) {
            return concat({{"codec/codec.rvq", "watermark/watermarker.json"},
                           p.range_paths(&P::generation_path, p.cfg_.n_generations), p.token_paths("test", p.cfg_.n_test),
                           p.range_paths(&P::test_wav, std::min(p.cfg_.n_fad_reference, p.cfg_.n_test))});
          },
          [](P& p) { return p.stage_eval_detection(); }}},
        {"eval-localization",
         {[](const P& p) {
            return concat({{"codec/codec.rvq", "watermark/watermarker.json"},
                           p.range_paths(&P::generation_path, std::min(p.cfg_.n_generations, p.cfg_.n_localization)),
                           p.range_paths(&P::test_wav, std::min(p.cfg_.n_test, p.cfg_.n_localization))});
          },
          [](P& p) { return p.stage_eval_localization(); }}},
        {"eval-robustness",
         {[](const P& p) {
            return concat({{"codec/codec.rvq", "codec/requant.rvq", "watermark/watermarker.json"},
                           p.range_paths(&P::generation_path, p.cfg_.n_generations), p.token_paths("test", p.cfg_.n_test)});
          },
          [](P& p) { return p.stage_eval_robustness(); }}},
        {"attack-decoder",
         {[](const P& p) {
            return concat({{"codec/codec.rvq", "watermark/watermarker.json"},
                           p.range_paths(&P::generation_path, p.cfg_.n_generations), p.token_paths("test", p.cfg_.n_test),
                           p.range_paths(&P::train_wav, p.cfg_.n_train)});
          },
          [](P& p) { return p.stage_attack_decoder(); }}},
        {"attack-finetune",
         {[](const P& p) {
            return concat({{"codec/codec.rvq", "watermark/watermarker.json", "lm/model.slm"},
                           p.token_paths("finetune", p.cfg_.finetune_n_signals), p.token_paths("test", p.cfg_.n_test),
                           p.range_paths(&P::test_wav, std::min(p.cfg_.n_fad_reference, p.cfg_.n_test))});
          },
          [](P& p) { return p.stage_attack_finetune(); }}},
        {"report",
         {[](const P&) {
            return std::vector<fs::path>{"eval/detection.json",   "eval/localization.json", "eval/robustness.json",
                                         "attack/decoder.json",   "attack/finetune.json",   "watermark/watermarker.json",
                                         "codec/codec.json",      "tokens/summary.json"};
          },
          [](P& p) { return p.stage_report(); }}},
    };
    return defs;
  }

  PipelineConfig cfg_;
  fs::path out_;
  std::ostream* log_;
};

}  // namespace latentmark
