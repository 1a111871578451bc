#pragma once

// Corpus curation (decode, standardize, score, fuse, threshold, manifest) and
// system benchmarking against human rankings.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "exprscore/audio.hpp"
#include "exprscore/external.hpp"
#include "exprscore/features.hpp"
#include "exprscore/fusion.hpp"
#include "exprscore/lmm.hpp"
#include "exprscore/quality.hpp"
#include "exprscore/scorers.hpp"
#include "exprscore/segment.hpp"
#include "exprscore/stats.hpp"

namespace exprscore {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  enum class Kind { InvalidConfig, NoFusionModel, PromptSetMismatch, TooFewSystems, MissingHumanScore, AsrUnavailable, Io };

  PipelineError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr double kDefaultThreshold = 63.5;
inline constexpr int kManifestSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CorpusRoot {
  std::string name;
  fs::path path;
  int base_level = 5;
  std::string language;
};

/// How one sub-dimension is scored: "native" (built-in proxy or heuristic),
/// "process" (spawned scorer), "http" (scorer endpoint) or "lmm" (prosody
/// only).
struct BackendConfig {
  std::string kind = "native";
  std::vector<std::string> command;
  std::string endpoint;
  int timeout_ms = 10000;
  fs::path prompt_template;
  std::string credential_env = LmmConfig{}.credential_env;
  int max_attempts = 3;
};

struct SegmentOptions {
  bool enabled = false;
  double min_utterance_s = 1.0;
  double min_pause_s = 0.4;
};

struct AsrConfig {
  std::string endpoint;
  int timeout_ms = 30000;
};

struct CorpusConfig {
  std::vector<CorpusRoot> roots;
  std::optional<fs::path> sidecar;
  BackendConfig emotion;
  BackendConfig prosody;
  BackendConfig spontaneity;
  double threshold = kDefaultThreshold;
  fs::path manifest = "manifest.jsonl";
  std::optional<fs::path> fusion_model;
  std::optional<fs::path> calibration;
  SegmentOptions segment;
  std::optional<AsrConfig> asr;
  int threads = 1;
  fs::path work_dir;

  void validate(bool require_roots = true) const {
    using Kind = PipelineError::Kind;
    if (require_roots && roots.empty()) throw PipelineError(Kind::InvalidConfig, "config lists no input roots");
    if (!(threshold >= 0.0 && threshold <= 100.0)) throw PipelineError(Kind::InvalidConfig, "threshold outside [0, 100]");
    std::set<std::string> names;
    for (const auto& r : roots) {
      if (!is_valid_base_level(r.base_level)) {
        throw PipelineError(Kind::InvalidConfig, "root " + r.name + ": base_level must be one of 1,3,5,7,9");
      }
      if (!names.insert(r.name).second) throw PipelineError(Kind::InvalidConfig, "duplicate root name " + r.name);
    }
    if (threads < 1) throw PipelineError(Kind::InvalidConfig, "threads must be >= 1");
    for (const auto* b : {&emotion, &prosody, &spontaneity}) {
      if (b->kind != "native" && b->kind != "process" && b->kind != "http" && b->kind != "lmm") {
        throw PipelineError(Kind::InvalidConfig, "unknown scorer backend " + b->kind);
      }
      if (b->kind == "process" && b->command.empty()) throw PipelineError(Kind::InvalidConfig, "process backend needs a command");
      if ((b->kind == "http" || b->kind == "lmm") && b->endpoint.empty()) {
        throw PipelineError(Kind::InvalidConfig, b->kind + " backend needs an endpoint");
      }
    }
    if (emotion.kind == "lmm" || spontaneity.kind == "lmm") {
      throw PipelineError(Kind::InvalidConfig, "the lmm backend rates prosody only");
    }
  }
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline BackendConfig backend_from_json(const nlohmann::json& j, const fs::path& base) {
  BackendConfig b;
  if (j.is_string()) {
    b.kind = j.get<std::string>();
    return b;
  }
  b.kind = j.value("kind", "native");
  if (j.contains("command")) b.command = j.at("command").get<std::vector<std::string>>();
  b.endpoint = j.value("endpoint", "");
  b.timeout_ms = j.value("timeout_ms", b.timeout_ms);
  if (j.contains("prompt_template")) b.prompt_template = resolve(base, j.at("prompt_template").get<std::string>());
  b.credential_env = j.value("credential_env", b.credential_env);
  b.max_attempts = j.value("max_attempts", b.max_attempts);
  return b;
}

}  // namespace detail

/// Reads a corpus config document. Relative paths resolve against `base`.
/// Commands that score loose files pass require_roots = false.
inline CorpusConfig corpus_config_from_json(const nlohmann::json& j, const fs::path& base = ".",
                                            bool require_roots = true) {
  using Kind = PipelineError::Kind;
  try {
    if (!j.is_object()) throw PipelineError(Kind::InvalidConfig, "config must be a JSON object");
    CorpusConfig c;
    for (const auto& r : require_roots || j.contains("roots") ? j.at("roots") : nlohmann::json::array()) {
      CorpusRoot root;
      root.path = detail::resolve(base, r.at("path").get<std::string>());
      root.base_level = r.at("base_level").get<int>();
      root.language = r.value("language", "");
      root.name = r.value("name", root.path.filename().string());
      c.roots.push_back(std::move(root));
    }
    if (j.contains("sidecar")) c.sidecar = detail::resolve(base, j.at("sidecar").get<std::string>());
    if (j.contains("backends")) {
      const auto& b = j.at("backends");
      if (b.contains("emotion")) c.emotion = detail::backend_from_json(b.at("emotion"), base);
      if (b.contains("prosody")) c.prosody = detail::backend_from_json(b.at("prosody"), base);
      if (b.contains("spontaneity")) c.spontaneity = detail::backend_from_json(b.at("spontaneity"), base);
    }
    c.threshold = j.value("threshold", kDefaultThreshold);
    c.manifest = detail::resolve(base, j.value("manifest", std::string("manifest.jsonl")));
    if (j.contains("fusion_model")) c.fusion_model = detail::resolve(base, j.at("fusion_model").get<std::string>());
    if (j.contains("calibration")) c.calibration = detail::resolve(base, j.at("calibration").get<std::string>());
    if (j.contains("segment")) {
      const auto& s = j.at("segment");
      c.segment.enabled = s.value("enabled", true);
      c.segment.min_utterance_s = s.value("min_utterance_s", c.segment.min_utterance_s);
      c.segment.min_pause_s = s.value("min_pause_s", c.segment.min_pause_s);
    }
    if (j.contains("asr")) {
      AsrConfig a;
      a.endpoint = j.at("asr").at("endpoint").get<std::string>();
      a.timeout_ms = j.at("asr").value("timeout_ms", a.timeout_ms);
      c.asr = a;
    }
    c.threads = j.value("threads", 1);
    c.work_dir = detail::resolve(base, j.value("work_dir", std::string("work")));
    c.validate(require_roots);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw PipelineError(Kind::InvalidConfig, std::string("bad corpus config: ") + e.what());
  }
}

inline CorpusConfig load_corpus_config(const fs::path& path, bool require_roots = true) {
  std::ifstream in(path);
  if (!in) throw PipelineError(PipelineError::Kind::InvalidConfig, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw PipelineError(PipelineError::Kind::InvalidConfig, std::string("config is not JSON: ") + e.what());
  }
  return corpus_config_from_json(j, fs::absolute(path).parent_path(), require_roots);
}

// ---------------------------------------------------------------------------
// Scoring hooks
// ---------------------------------------------------------------------------

/// Everything known about one unit (clip or segment) when it is scored.
struct ClipContext {
  std::string id;
  fs::path audio_path;  // file an external scorer can read
  const AudioClip* clip = nullptr;
  const FeatureSummary* features = nullptr;
  QualityMetrics quality;
  int base_level = 5;
};

class SubScoreProvider {
 public:
  virtual ~SubScoreProvider() = default;
  virtual SubScores score(const ClipContext& ctx) = 0;
};

/// Native proxies and the spontaneity heuristic, with any dimension
/// optionally delegated to an external scorer or (prosody) an LMM rater.
class ConfiguredProvider : public SubScoreProvider {
 public:
  explicit ConfiguredProvider(ScorerCalibration cal) : cal_(std::move(cal)) {}

  ConfiguredProvider(const CorpusConfig& cfg, ScorerCalibration cal) : cal_(std::move(cal)) {
    emotion_ = make_external(cfg.emotion);
    prosody_ = make_external(cfg.prosody);
    spontaneity_ = make_external(cfg.spontaneity);
    if (cfg.prosody.kind == "lmm") {
      LmmConfig lc;
      lc.endpoint = cfg.prosody.endpoint;
      lc.credential_env = cfg.prosody.credential_env;
      lc.timeout = std::chrono::milliseconds(cfg.prosody.timeout_ms);
      lc.max_attempts = cfg.prosody.max_attempts;
      const auto prompt =
          cfg.prosody.prompt_template.empty() ? default_prosody_prompt() : load_prompt_template(cfg.prosody.prompt_template);
      lmm_ = std::make_unique<LmmAnnotator>(lc, prompt);
    }
  }

  bool needs_audio_file() const { return emotion_ || prosody_ || spontaneity_ || lmm_; }

  SubScores score(const ClipContext& ctx) override {
    SubScores s;
    if (emotion_) {
      s.s_emo = emotion_->score({ctx.id, ctx.audio_path, Dimension::Emotion});
      s.emo_source = Provenance::ExternalScorer;
    } else {
      s.s_emo = score_emotion_proxy(*ctx.features, cal_);
      s.emo_source = Provenance::NativeProxy;
    }
    if (lmm_) {
      s.s_pros = lmm_->rate(ctx.id, ctx.audio_path).score;
      s.pros_source = Provenance::LmmAnnotator;
    } else if (prosody_) {
      s.s_pros = prosody_->score({ctx.id, ctx.audio_path, Dimension::Prosody});
      s.pros_source = Provenance::ExternalScorer;
    } else {
      s.s_pros = score_prosody_proxy(*ctx.features, cal_);
      s.pros_source = Provenance::NativeProxy;
    }
    if (spontaneity_) {
      s.s_spon = spontaneity_->score({ctx.id, ctx.audio_path, Dimension::Spontaneity});
      s.spon_source = Provenance::ExternalScorer;
    } else {
      s.s_spon = score_spontaneity(ctx.quality, SpontaneityConfig::for_level(ctx.base_level));
      s.spon_source = Provenance::Heuristic;
    }
    return s;
  }

 private:
  static std::shared_ptr<ExternalScorer> make_external(const BackendConfig& b) {
    const std::chrono::milliseconds deadline(b.timeout_ms);
    if (b.kind == "process") return std::make_shared<CachedScorer>(std::make_shared<ProcessScorer>(b.command, deadline));
    if (b.kind == "http") return std::make_shared<CachedScorer>(std::make_shared<HttpScorer>(b.endpoint, deadline));
    return nullptr;
  }

  ScorerCalibration cal_;
  std::shared_ptr<ExternalScorer> emotion_;
  std::shared_ptr<ExternalScorer> prosody_;
  std::shared_ptr<ExternalScorer> spontaneity_;
  std::unique_ptr<LmmAnnotator> lmm_;
};

class AsrClient {
 public:
  virtual ~AsrClient() = default;
  /// Throws PipelineError(AsrUnavailable) when the service cannot answer.
  virtual std::string transcribe(const AudioClip& clip) = 0;
};

/// POSTs 16-bit WAV bytes and reads {"text": ...}.
class HttpAsrClient : public AsrClient {
 public:
  explicit HttpAsrClient(const AsrConfig& cfg) : timeout_(cfg.timeout_ms) {
    try {
      std::tie(base_, path_) = split_url(cfg.endpoint);
    } catch (const ScorerError& e) {
      throw PipelineError(PipelineError::Kind::InvalidConfig, e.what());
    }
  }

  std::string transcribe(const AudioClip& clip) override {
    using Kind = PipelineError::Kind;
    const auto bytes = encode_wav_pcm16(clip);
    httplib::Client client(base_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    const auto res = client.Post(path_, std::string(bytes.begin(), bytes.end()), "audio/wav");
    if (!res) throw PipelineError(Kind::AsrUnavailable, "ASR unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) throw PipelineError(Kind::AsrUnavailable, "ASR returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        throw PipelineError(Kind::AsrUnavailable, "ASR reply lacks a text field");
      }
      return j["text"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw PipelineError(Kind::AsrUnavailable, "ASR reply is not JSON");
    }
  }

 private:
  std::chrono::milliseconds timeout_;
  std::string base_;
  std::string path_;
};

inline std::string transcribe_via_asr(const AudioClip& clip, AsrClient& asr) { return asr.transcribe(clip); }

// ---------------------------------------------------------------------------
// Curation
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::string source;
  std::string root;
  std::string language;
  int base_level = 0;
  std::optional<double> start_s;  // set for segments
  std::optional<double> end_s;
  double duration_s = 0.0;
  std::optional<QualityMetrics> quality;
  std::optional<SubScores> scores;
  std::optional<double> s_expr;
  bool selected = false;
  std::optional<std::string> transcript;
  std::optional<FeatureSummary> features;
  std::vector<std::string> warnings;
  std::optional<std::string> error;
};

struct CurationSummary {
  std::string generated_at;
  std::size_t entries = 0;
  std::size_t errors = 0;
  std::size_t selected = 0;
  double total_hours = 0.0;
  double selected_hours = 0.0;
  std::optional<double> mean_s_expr_selected;
  std::map<std::string, double> language_ratio;  // share of selected hours
};

struct CurationResult {
  std::vector<ManifestEntry> entries;  // ordered by id
  CurationSummary summary;
};

/// Optional overrides; anything left empty is built from the config.
struct CurationHooks {
  SubScoreProvider* provider = nullptr;
  const FusionModel* model = nullptr;
  AsrClient* asr = nullptr;
  std::function<std::string()> clock;
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline bool is_wav(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".wav";
}

struct SourceFile {
  std::string id;
  fs::path path;
  const CorpusRoot* root = nullptr;
};

inline std::vector<SourceFile> enumerate_sources(const CorpusConfig& cfg) {
  std::vector<SourceFile> out;
  for (const auto& root : cfg.roots) {
    if (!fs::is_directory(root.path)) {
      throw PipelineError(PipelineError::Kind::Io, "input root is not a directory: " + root.path.string());
    }
    for (const auto& e : fs::recursive_directory_iterator(root.path)) {
      if (!e.is_regular_file() || !is_wav(e.path())) continue;
      auto rel = fs::relative(e.path(), root.path);
      rel.replace_extension();
      out.push_back({root.name + "/" + rel.generic_string(), e.path(), &root});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

inline std::string safe_file_name(const std::string& id) {
  std::string s = id;
  for (auto& c : s) {
    if (c == '/' || c == '\\' || c == ':') c = '_';
  }
  return s;
}

}  // namespace detail

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline CurationSummary summarize_manifest(const std::vector<ManifestEntry>& entries, std::string generated_at) {
  CurationSummary s;
  s.generated_at = std::move(generated_at);
  s.entries = entries.size();
  double expr_sum = 0.0;
  std::map<std::string, double> lang_seconds;
  double selected_seconds = 0.0, total_seconds = 0.0;
  for (const auto& e : entries) {
    if (e.error) {
      ++s.errors;
      continue;
    }
    total_seconds += e.duration_s;
    if (!e.selected) continue;
    ++s.selected;
    selected_seconds += e.duration_s;
    expr_sum += *e.s_expr;
    lang_seconds[e.language] += e.duration_s;
  }
  s.total_hours = total_seconds / 3600.0;
  s.selected_hours = selected_seconds / 3600.0;
  if (s.selected > 0) s.mean_s_expr_selected = expr_sum / static_cast<double>(s.selected);
  for (const auto& [lang, secs] : lang_seconds) {
    s.language_ratio[lang] = selected_seconds > 0.0 ? secs / selected_seconds : 0.0;
  }
  return s;
}

inline CurationResult curate(const CorpusConfig& cfg, const CurationHooks& hooks = {}) {
  using Kind = PipelineError::Kind;
  cfg.validate();

  FusionModel loaded_model;
  const FusionModel* model = hooks.model;
  if (!model) {
    if (!cfg.fusion_model) throw PipelineError(Kind::NoFusionModel, "no fusion model configured");
    try {
      loaded_model = load_model(*cfg.fusion_model);
    } catch (const FusionError& e) {
      throw PipelineError(Kind::NoFusionModel, std::string("fusion model unusable: ") + e.what());
    }
    model = &loaded_model;
  }

  std::map<std::string, QualityMetrics> sidecar;
  if (cfg.sidecar) {
    try {
      sidecar = load_sidecar(*cfg.sidecar);
    } catch (const QualityError& e) {
      throw PipelineError(Kind::InvalidConfig, e.what());
    }
  }

  std::unique_ptr<ConfiguredProvider> own_provider;
  SubScoreProvider* provider = hooks.provider;
  bool external_audio = false;
  if (!provider) {
    const auto cal = cfg.calibration ? load_calibration(*cfg.calibration) : default_calibration();
    own_provider = std::make_unique<ConfiguredProvider>(cfg, cal);
    external_audio = own_provider->needs_audio_file();
    provider = own_provider.get();
  }
  std::unique_ptr<HttpAsrClient> own_asr;
  AsrClient* asr = hooks.asr;
  if (!asr && cfg.asr) {
    own_asr = std::make_unique<HttpAsrClient>(*cfg.asr);
    asr = own_asr.get();
  }
  if (external_audio && cfg.segment.enabled) fs::create_directories(cfg.work_dir / "segments");

  const auto sources = detail::enumerate_sources(cfg);
  std::vector<std::vector<ManifestEntry>> per_source(sources.size());

  parallel_for(sources.size(), cfg.threads, [&](std::size_t i) {
    const auto& src = sources[i];
    auto base_entry = [&](const std::string& id) {
      ManifestEntry e;
      e.id = id;
      e.source = src.path.generic_string();
      e.root = src.root->name;
      e.language = src.root->language;
      e.base_level = src.root->base_level;
      return e;
    };

    AudioClip clip({0.0f}, kCanonicalRate);
    try {
      clip = resample(read_wav(src.path, src.id), kCanonicalRate);
    } catch (const std::exception& ex) {
      auto e = base_entry(src.id);
      e.error = ex.what();
      per_source[i].push_back(std::move(e));
      return;
    }

    struct Unit {
      std::string id;
      AudioClip clip;
      std::optional<double> start_s, end_s;
    };
    std::vector<Unit> units;
    if (cfg.segment.enabled) {
      const auto segs = segment_by_silence(clip, cfg.segment.min_utterance_s, cfg.segment.min_pause_s);
      for (std::size_t k = 0; k < segs.size(); ++k) {
        units.push_back({segment_id(src.id, k), segs[k].clip, segs[k].start_s, segs[k].end_s});
      }
    } else {
      units.push_back({src.id, clip, std::nullopt, std::nullopt});
    }

    for (auto& u : units) {
      auto e = base_entry(u.id);
      e.start_s = u.start_s;
      e.end_s = u.end_s;
      e.duration_s = u.clip.duration_seconds();
      try {
        const auto feats = analyze(u.clip);
        const auto summary = summarize(feats);
        QualityMetrics q;
        if (auto it = sidecar.find(u.id); it != sidecar.end()) {
          q = it->second;
        } else if (auto parent = sidecar.find(src.id); parent != sidecar.end()) {
          q = parent->second;
        } else {
          q = estimate_quality(u.clip, feats);
        }
        ClipContext ctx;
        ctx.id = u.id;
        ctx.audio_path = src.path;
        if (external_audio && u.start_s) {
          ctx.audio_path = cfg.work_dir / "segments" / (detail::safe_file_name(u.id) + ".wav");
          write_wav(ctx.audio_path, u.clip);
        }
        ctx.clip = &u.clip;
        ctx.features = &summary;
        ctx.quality = q;
        ctx.base_level = src.root->base_level;
        const auto scores = provider->score(ctx);
        if (!scores.valid()) throw ScorerError(ScorerError::Kind::ScoreOutOfRange, "sub-score outside [0, 100]");
        e.quality = q;
        e.scores = scores;
        e.features = summary;
        e.s_expr = model->predict(scores);
        e.selected = *e.s_expr >= cfg.threshold;
        if (asr) {
          try {
            e.transcript = asr->transcribe(u.clip);
          } catch (const PipelineError& ex) {
            e.warnings.push_back(std::string("untranscribed: ") + ex.what());
          }
        }
      } catch (const std::exception& ex) {
        e.error = ex.what();
        e.selected = false;
      }
      per_source[i].push_back(std::move(e));
    }
  });

  CurationResult result;
  for (auto& v : per_source) {
    for (auto& e : v) result.entries.push_back(std::move(e));
  }
  std::stable_sort(result.entries.begin(), result.entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  result.summary = summarize_manifest(result.entries, hooks.clock ? hooks.clock() : detail::utc_timestamp());
  return result;
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const QualityMetrics& q) {
  return {{"ovrl", q.ovrl}, {"sig", q.sig}, {"bak", q.bak}, {"p808", q.p808}, {"source", to_string(q.source)}};
}

inline nlohmann::json to_json(const SubScores& s) {
  return {{"s_emo", s.s_emo},
          {"s_pros", s.s_pros},
          {"s_spon", s.s_spon},
          {"provenance",
           {{"s_emo", to_string(s.emo_source)}, {"s_pros", to_string(s.pros_source)}, {"s_spon", to_string(s.spon_source)}}}};
}

inline nlohmann::json to_json(const FeatureSummary& f) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"f0_range_st", opt(f.f0_range_st)},
          {"f0_std_st", opt(f.f0_std_st)},
          {"f0_turns_per_s", opt(f.f0_turns_per_s)},
          {"energy_std_db", f.energy_std_db},
          {"energy_range_db", f.energy_range_db},
          {"pause_cv", f.pause_cv},
          {"voiced_fraction", f.voiced_fraction},
          {"syllable_rate_proxy", f.syllable_rate_proxy}};
}

inline nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json j{{"schema_version", kManifestSchemaVersion}, {"id", e.id}, {"source", e.source}, {"root", e.root},
                   {"language", e.language}, {"base_level", e.base_level}};
  if (e.error) {
    j["error"] = *e.error;
    j["selected"] = false;
    return j;
  }
  if (e.start_s) {
    j["start_s"] = *e.start_s;
    j["end_s"] = *e.end_s;
  }
  j["duration_s"] = e.duration_s;
  j["quality"] = to_json(*e.quality);
  j["scores"] = to_json(*e.scores);
  j["s_expr"] = *e.s_expr;
  j["selected"] = e.selected;
  j["transcript"] = e.transcript ? nlohmann::json(*e.transcript) : nlohmann::json(nullptr);
  j["features"] = to_json(*e.features);
  j["warnings"] = e.warnings;
  return j;
}

inline nlohmann::json to_json(const CurationSummary& s) {
  return {{"schema_version", kManifestSchemaVersion},
          {"generated_at", s.generated_at},
          {"entries", s.entries},
          {"errors", s.errors},
          {"selected", s.selected},
          {"total_hours", s.total_hours},
          {"selected_hours", s.selected_hours},
          {"mean_s_expr_selected",
           s.mean_s_expr_selected ? nlohmann::json(*s.mean_s_expr_selected) : nlohmann::json(nullptr)},
          {"language_ratio", s.language_ratio}};
}

inline std::string serialize_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += to_json(e).dump() + "\n";
  return out;
}

inline fs::path summary_path_for(const fs::path& manifest) {
  auto p = manifest;
  p.replace_extension(".summary.json");
  return p;
}

inline void write_curation(const CurationResult& r, const fs::path& manifest) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  {
    std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw PipelineError(PipelineError::Kind::Io, "cannot write " + manifest.string());
    out << serialize_manifest(r.entries);
  }
  std::ofstream out(summary_path_for(manifest), std::ios::binary | std::ios::trunc);
  if (!out) throw PipelineError(PipelineError::Kind::Io, "cannot write summary for " + manifest.string());
  out << to_json(r.summary).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct UtteranceScore {
  std::string prompt_id;
  SubScores scores;
  double s_expr = 0.0;
};

struct SystemScores {
  std::string name;
  std::vector<UtteranceScore> utterances;
};

struct SystemSummary {
  std::string name;
  std::size_t utterances = 0;
  double mean_emo = 0.0;
  double mean_pros = 0.0;
  double mean_spon = 0.0;
  double mean_expr = 0.0;
  double rank = 0.0;
  std::optional<double> human_score;
  std::optional<double> human_rank;
};

struct BenchmarkReport {
  std::vector<SystemSummary> systems;  // input order
  std::optional<double> srcc;
  std::vector<SystemScores> utterances;
};

/// Ranks descending by value; ties share the average rank.
inline std::vector<double> descending_ranks(const std::vector<double>& values) {
  std::vector<double> neg(values.size());
  std::transform(values.begin(), values.end(), neg.begin(), [](double v) { return -v; });
  return stats::average_ranks(neg);
}

inline BenchmarkReport benchmark(std::vector<SystemScores> systems,
                                 const std::optional<std::map<std::string, double>>& human = std::nullopt) {
  using Kind = PipelineError::Kind;
  if (systems.size() < 2) throw PipelineError(Kind::TooFewSystems, "benchmark needs at least two systems");
  // Sum in prompt order so means do not depend on input order.
  for (auto& s : systems) {
    std::sort(s.utterances.begin(), s.utterances.end(),
              [](const auto& a, const auto& b) { return a.prompt_id < b.prompt_id; });
    if (s.utterances.empty()) throw PipelineError(Kind::PromptSetMismatch, "system " + s.name + " has no utterances");
  }
  auto prompts = [](const SystemScores& s) {
    std::vector<std::string> ids;
    for (const auto& u : s.utterances) ids.push_back(u.prompt_id);
    return ids;
  };
  const auto reference = prompts(systems.front());
  for (const auto& s : systems) {
    if (prompts(s) != reference) {
      throw PipelineError(Kind::PromptSetMismatch,
                          "system " + s.name + " does not cover the same prompts as " + systems.front().name);
    }
  }

  BenchmarkReport report;
  std::vector<double> means;
  for (const auto& s : systems) {
    SystemSummary sum;
    sum.name = s.name;
    sum.utterances = s.utterances.size();
    for (const auto& u : s.utterances) {
      sum.mean_emo += u.scores.s_emo;
      sum.mean_pros += u.scores.s_pros;
      sum.mean_spon += u.scores.s_spon;
      sum.mean_expr += u.s_expr;
    }
    const auto n = static_cast<double>(s.utterances.size());
    sum.mean_emo /= n;
    sum.mean_pros /= n;
    sum.mean_spon /= n;
    sum.mean_expr /= n;
    means.push_back(sum.mean_expr);
    report.systems.push_back(sum);
  }
  const auto ranks = descending_ranks(means);
  for (std::size_t i = 0; i < ranks.size(); ++i) report.systems[i].rank = ranks[i];

  if (human) {
    std::vector<double> h;
    for (auto& s : report.systems) {
      const auto it = human->find(s.name);
      if (it == human->end()) throw PipelineError(Kind::MissingHumanScore, "no human score for system " + s.name);
      s.human_score = it->second;
      h.push_back(it->second);
    }
    const auto hr = descending_ranks(h);
    for (std::size_t i = 0; i < hr.size(); ++i) report.systems[i].human_rank = hr[i];
    report.srcc = stats::spearman(means, h);
  }
  report.utterances = std::move(systems);
  return report;
}

/// Reads `system,score` rows.
inline std::map<std::string, double> load_human_scores(const fs::path& path) {
  using Kind = PipelineError::Kind;
  std::ifstream in(path);
  if (!in) throw PipelineError(Kind::Io, "cannot open human scores " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  const auto sys_col = std::find(header.begin(), header.end(), "system");
  const auto score_col = std::find(header.begin(), header.end(), "score");
  if (sys_col == header.end() || score_col == header.end()) {
    throw PipelineError(Kind::InvalidConfig, "human scores need columns system,score");
  }
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) throw PipelineError(Kind::InvalidConfig, "malformed human score row: " + line);
    const auto v = detail::parse_double(f[static_cast<std::size_t>(score_col - header.begin())]);
    if (!v) throw PipelineError(Kind::InvalidConfig, "bad human score: " + line);
    out[f[static_cast<std::size_t>(sys_col - header.begin())]] = *v;
  }
  return out;
}

/// Reads per-utterance rows `prompt_id,s_emo,s_pros,s_spon,s_expr`.
inline SystemScores load_system_csv(const fs::path& path, std::string name) {
  using Kind = PipelineError::Kind;
  std::ifstream in(path);
  if (!in) throw PipelineError(Kind::Io, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  constexpr std::array<const char*, 5> names{"prompt_id", "s_emo", "s_pros", "s_spon", "s_expr"};
  std::array<std::size_t, 5> col{};
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = std::find(header.begin(), header.end(), names[k]);
    if (it == header.end()) throw PipelineError(Kind::InvalidConfig, path.string() + ": missing column " + names[k]);
    col[k] = static_cast<std::size_t>(it - header.begin());
  }
  SystemScores s;
  s.name = std::move(name);
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) throw PipelineError(Kind::InvalidConfig, path.string() + ": malformed row");
    std::array<double, 4> v{};
    for (std::size_t k = 1; k < 5; ++k) {
      const auto parsed = detail::parse_double(f[col[k]]);
      if (!parsed || !(*parsed >= 0.0 && *parsed <= 100.0)) {
        throw PipelineError(Kind::InvalidConfig, path.string() + ": bad score in row " + line);
      }
      v[k - 1] = *parsed;
    }
    UtteranceScore u;
    u.prompt_id = f[col[0]];
    u.scores.s_emo = v[0];
    u.scores.s_pros = v[1];
    u.scores.s_spon = v[2];
    u.s_expr = v[3];
    s.utterances.push_back(std::move(u));
  }
  return s;
}

/// One system per `<name>.csv` in `dir`, ordered by file name.
inline std::vector<SystemScores> load_systems_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw PipelineError(PipelineError::Kind::Io, "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SystemScores> out;
  for (const auto& f : files) out.push_back(load_system_csv(f, f.stem().string()));
  return out;
}

/// Scores every WAV in `dir` (prompt id = file stem) with the native path.
inline SystemScores score_system_dir(const fs::path& dir, std::string name, SubScoreProvider& provider,
                                     const FusionModel& model, int base_level, int threads = 1) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && detail::is_wav(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  SystemScores s;
  s.name = std::move(name);
  s.utterances.resize(files.size());
  parallel_for(files.size(), threads, [&](std::size_t i) {
    const auto clip = resample(read_wav(files[i]), kCanonicalRate);
    const auto feats = analyze(clip);
    const auto summary = summarize(feats);
    ClipContext ctx;
    ctx.id = s.name + "/" + files[i].stem().string();
    ctx.audio_path = files[i];
    ctx.clip = &clip;
    ctx.features = &summary;
    ctx.quality = estimate_quality(clip, feats);
    ctx.base_level = base_level;
    auto& u = s.utterances[i];
    u.prompt_id = files[i].stem().string();
    u.scores = provider.score(ctx);
    u.s_expr = model.predict(u.scores);
  });
  return s;
}

inline nlohmann::json to_json(const BenchmarkReport& r) {
  nlohmann::json systems = nlohmann::json::array();
  for (const auto& s : r.systems) {
    nlohmann::json j{{"system", s.name},      {"utterances", s.utterances}, {"s_emo", s.mean_emo},
                     {"s_pros", s.mean_pros}, {"s_spon", s.mean_spon},      {"s_expr", s.mean_expr},
                     {"rank", s.rank}};
    if (s.human_score) {
      j["human_score"] = *s.human_score;
      j["human_rank"] = *s.human_rank;
    }
    systems.push_back(std::move(j));
  }
  nlohmann::json table = nlohmann::json::array();
  for (const auto& s : r.utterances) {
    for (const auto& u : s.utterances) {
      table.push_back({{"system", s.name},
                       {"prompt_id", u.prompt_id},
                       {"s_emo", u.scores.s_emo},
                       {"s_pros", u.scores.s_pros},
                       {"s_spon", u.scores.s_spon},
                       {"s_expr", u.s_expr}});
    }
  }
  nlohmann::json j{{"systems", systems}, {"utterances", table}};
  j["srcc"] = r.srcc ? nlohmann::json(*r.srcc) : nlohmann::json(nullptr);
  return j;
}

}  // namespace exprscore
