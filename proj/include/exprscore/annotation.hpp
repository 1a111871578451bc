#pragma once

// Backend for the listening-test UI: serves a clip roster, collects 1-5
// ratings per (clip, annotator), reports agreement and exports fusion
// training rows.

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "exprscore/audio.hpp"
#include "exprscore/fusion.hpp"
#include "exprscore/numeric.hpp"
#include "exprscore/quality.hpp"
#include "exprscore/stats.hpp"

namespace exprscore {

namespace fs = std::filesystem;

class AnnotationError : public std::runtime_error {
 public:
  enum class Kind { InvalidRoster, Io };

  AnnotationError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr int kRatingMin = 1;
inline constexpr int kRatingMax = 5;

struct RosterClip {
  std::string id;
  fs::path audio;
  std::optional<double> start_s;  // slice of `audio` for segmented units
  std::optional<double> end_s;
  std::optional<FusionFeatures> subscores;
};

struct Roster {
  std::vector<RosterClip> clips;  // ordered by id

  const RosterClip* find(const std::string& id) const {
    const auto it = std::lower_bound(clips.begin(), clips.end(), id, [](const auto& c, const auto& k) { return c.id < k; });
    return it != clips.end() && it->id == id ? &*it : nullptr;
  }

  void sort_and_check() {
    std::sort(clips.begin(), clips.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < clips.size(); ++i) {
      if (clips[i].id == clips[i - 1].id) throw AnnotationError(AnnotationError::Kind::InvalidRoster, "duplicate clip " + clips[i].id);
    }
  }
};

/// Reads `id,audio[,s_emo,s_pros,s_spon]`. Relative audio paths resolve
/// against the roster's directory. Sub-score cells may be empty.
inline Roster load_roster_csv(const fs::path& path) {
  using Kind = AnnotationError::Kind;
  std::ifstream in(path);
  if (!in) throw AnnotationError(Kind::Io, "cannot open roster " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw AnnotationError(Kind::InvalidRoster, "roster is empty");
  const auto header = detail::split_csv_line(line);
  auto column = [&](const char* name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto id_col = column("id"), audio_col = column("audio");
  if (!id_col || !audio_col) throw AnnotationError(Kind::InvalidRoster, "roster needs id and audio columns");
  const std::array<std::optional<std::size_t>, 3> score_cols{column("s_emo"), column("s_pros"), column("s_spon")};
  const auto base = fs::absolute(path).parent_path();

  Roster roster;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    const auto where = "roster line " + std::to_string(line_no);
    if (f.size() != header.size()) throw AnnotationError(Kind::InvalidRoster, where + ": wrong field count");
    RosterClip c;
    c.id = f[*id_col];
    const fs::path audio(f[*audio_col]);
    c.audio = audio.is_absolute() ? audio : base / audio;
    FusionFeatures s{};
    std::size_t present = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      if (!score_cols[k] || detail::trim(f[*score_cols[k]]).empty()) continue;
      const auto v = detail::parse_double(f[*score_cols[k]]);
      if (!v || !(*v >= 0.0 && *v <= 100.0)) throw AnnotationError(Kind::InvalidRoster, where + ": bad sub-score");
      s[k] = *v;
      ++present;
    }
    if (present == 3) c.subscores = s;
    else if (present != 0) throw AnnotationError(Kind::InvalidRoster, where + ": partial sub-scores");
    roster.clips.push_back(std::move(c));
  }
  roster.sort_and_check();
  return roster;
}

/// Builds a roster from the non-error entries of a curation manifest.
inline Roster load_roster_manifest(const fs::path& path, bool selected_only = false) {
  using Kind = AnnotationError::Kind;
  std::ifstream in(path);
  if (!in) throw AnnotationError(Kind::Io, "cannot open manifest " + path.string());
  Roster roster;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("error")) continue;
      if (selected_only && !j.at("selected").get<bool>()) continue;
      RosterClip c;
      c.id = j.at("id").get<std::string>();
      c.audio = j.at("source").get<std::string>();
      if (j.contains("start_s")) {
        c.start_s = j.at("start_s").get<double>();
        c.end_s = j.at("end_s").get<double>();
      }
      const auto& s = j.at("scores");
      c.subscores = FusionFeatures{s.at("s_emo").get<double>(), s.at("s_pros").get<double>(), s.at("s_spon").get<double>()};
      roster.clips.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw AnnotationError(Kind::InvalidRoster, std::string("bad manifest line: ") + e.what());
    }
  }
  roster.sort_and_check();
  return roster;
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Ratings keyed by (clip, annotator). Every change is appended to a JSONL
/// log; the last line for a key wins. Opening the store compacts the log.
class RatingStore {
 public:
  using Key = std::pair<std::string, std::string>;  // clip id, annotator

  struct Entry {
    int score = 0;
    std::string timestamp;
  };

  explicit RatingStore(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      if (detail::trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        ratings_[{j.at("clip").get<std::string>(), j.at("annotator").get<std::string>()}] =
            Entry{j.at("score").get<int>(), j.value("timestamp", "")};
      } catch (const nlohmann::json::exception&) {
        ++skipped_;  // a torn final line after a crash
      }
    }
    in.close();
    compact();
    out_.open(path_, std::ios::app);
    if (!out_) throw AnnotationError(AnnotationError::Kind::Io, "cannot append to " + path_.string());
  }

  /// Returns true when an existing rating was replaced. Re-posting the
  /// current score changes nothing, not even the log.
  bool upsert(const std::string& clip_id, const std::string& annotator, int score) {
    std::lock_guard lock(mu_);
    const auto it = ratings_.find({clip_id, annotator});
    if (it != ratings_.end() && it->second.score == score) return false;
    const Entry e{score, utc_now()};
    out_ << line_for(clip_id, annotator, e) << '\n';
    out_.flush();
    if (!out_) throw AnnotationError(AnnotationError::Kind::Io, "rating log write failed");
    const bool replaced = it != ratings_.end();
    ratings_[{clip_id, annotator}] = e;
    return replaced;
  }

  /// Scores only.
  std::map<Key, int> snapshot() const {
    std::lock_guard lock(mu_);
    std::map<Key, int> out;
    for (const auto& [k, e] : ratings_) out.emplace(k, e.score);
    return out;
  }

  std::map<Key, Entry> entries() const {
    std::lock_guard lock(mu_);
    return ratings_;
  }

  std::size_t skipped_lines() const noexcept { return skipped_; }
  const fs::path& path() const noexcept { return path_; }

 private:
  static std::string line_for(const std::string& clip_id, const std::string& annotator, const Entry& e) {
    return nlohmann::json{{"clip", clip_id}, {"annotator", annotator}, {"score", e.score}, {"timestamp", e.timestamp}}
        .dump();
  }

  void compact() {
    const auto tmp = fs::path(path_.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw AnnotationError(AnnotationError::Kind::Io, "cannot write " + tmp.string());
      for (const auto& [key, e] : ratings_) out << line_for(key.first, key.second, e) << '\n';
    }
    fs::rename(tmp, path_);
  }

  fs::path path_;
  mutable std::mutex mu_;
  std::map<Key, Entry> ratings_;
  std::ofstream out_;
  std::size_t skipped_ = 0;
};

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class AnnotationService {
 public:
  AnnotationService(Roster roster, fs::path ratings_path) : roster_(std::move(roster)), store_(std::move(ratings_path)) {}

  const Roster& roster() const noexcept { return roster_; }
  RatingStore& store() noexcept { return store_; }

  /// Roster plus how many clips each annotator has rated. With an annotator
  /// id, each clip also carries that annotator's current score.
  HttpReply list_clips(const std::string& annotator = {}) const {
    const auto ratings = store_.snapshot();
    std::map<std::string, int> counts;
    std::map<std::string, int> progress;
    for (const auto& [key, r] : ratings) {
      ++counts[key.first];
      ++progress[key.second];
    }
    auto out = nlohmann::json::array();
    for (const auto& c : roster_.clips) {
      nlohmann::json j{{"id", c.id}, {"audio_url", "/clips/" + c.id + "/audio"}, {"ratings", counts[c.id]}};
      if (!annotator.empty()) {
        const auto it = ratings.find({c.id, annotator});
        j["your_score"] = it == ratings.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
      }
      out.push_back(std::move(j));
    }
    nlohmann::json body{{"clips", out}, {"total", roster_.clips.size()}, {"progress", progress}};
    return {200, "application/json", body.dump()};
  }

  HttpReply clip_audio(const std::string& id) const {
    const auto* c = roster_.find(id);
    if (!c) return error(404, "unknown clip " + id);
    try {
      if (!c->start_s) {
        const auto bytes = read_file_bytes(c->audio);
        return {200, "audio/wav", std::string(bytes.begin(), bytes.end())};
      }
      const auto clip = read_wav(c->audio);
      const auto samples = clip.samples();
      const auto a = std::min(samples.size() - 1, static_cast<std::size_t>(std::llround(*c->start_s * clip.sample_rate())));
      const auto b = std::clamp(static_cast<std::size_t>(std::llround(*c->end_s * clip.sample_rate())), a + 1, samples.size());
      const auto bytes = encode_wav_pcm16(
          AudioClip(std::vector<float>(samples.begin() + static_cast<std::ptrdiff_t>(a), samples.begin() + static_cast<std::ptrdiff_t>(b)),
                    clip.sample_rate()));
      return {200, "audio/wav", std::string(bytes.begin(), bytes.end())};
    } catch (const std::exception& e) {
      return error(500, std::string("cannot read audio: ") + e.what());
    }
  }

  HttpReply post_rating(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return error(400, "body is not JSON");
    }
    if (!j.is_object()) return error(400, "body must be an object");
    if (!j.contains("clip") || !j["clip"].is_string()) return error(400, "clip must be a string");
    if (!j.contains("annotator") || !j["annotator"].is_string() || j["annotator"].get<std::string>().empty()) {
      return error(400, "annotator must be a non-empty string");
    }
    if (!j.contains("score") || !j["score"].is_number_integer()) return error(400, "score must be an integer from 1 to 5");
    const auto score = j["score"].get<long long>();
    if (score < kRatingMin || score > kRatingMax) return error(400, "score must be an integer from 1 to 5");
    const auto clip_id = j["clip"].get<std::string>();
    if (!roster_.find(clip_id)) return error(404, "unknown clip " + clip_id);
    const auto annotator = j["annotator"].get<std::string>();
    const bool replaced = store_.upsert(clip_id, annotator, static_cast<int>(score));
    return {200, "application/json",
            nlohmann::json{{"clip", clip_id}, {"annotator", annotator}, {"score", score}, {"replaced", replaced}}.dump()};
  }

  HttpReply agreement() const {
    const auto ratings = store_.snapshot();
    std::set<std::string> annotators, clips;
    for (const auto& [key, r] : ratings) {
      clips.insert(key.first);
      annotators.insert(key.second);
    }
    nlohmann::json j{{"annotators", annotators.size()}, {"clips", clips.size()}, {"ratings", ratings.size()},
                     {"metric", "interval"}, {"alpha", nullptr}};
    const std::vector<std::string> clip_list(clips.begin(), clips.end());
    std::vector<std::vector<std::optional<double>>> matrix;
    for (const auto& a : annotators) {
      std::vector<std::optional<double>> row;
      for (const auto& c : clip_list) {
        const auto it = ratings.find({c, a});
        row.push_back(it == ratings.end() ? std::nullopt : std::optional<double>(it->second));
      }
      matrix.push_back(std::move(row));
    }
    try {
      j["alpha"] = stats::krippendorff_alpha(stats::RatingMatrix(std::move(matrix), kRatingMin, kRatingMax));
    } catch (const stats::StatsError& e) {
      j["reason"] = e.what();
    }
    return {200, "application/json", j.dump()};
  }

  /// One row per rated clip, ordered by id. The target maps the mean rating
  /// onto 0-100.
  HttpReply export_csv() const {
    const auto ratings = store_.snapshot();
    std::map<std::string, std::pair<double, int>> sums;
    for (const auto& [key, r] : ratings) {
      auto& s = sums[key.first];
      s.first += r;
      ++s.second;
    }
    std::vector<std::string> missing;
    for (const auto& [id, s] : sums) {
      if (!roster_.find(id)->subscores) missing.push_back(id);
    }
    if (!missing.empty()) {
      return {409, "application/json",
              nlohmann::json{{"error", "rated clips lack sub-scores"}, {"clips", missing}}.dump()};
    }
    std::string csv = "clip_id,s_emo,s_pros,s_spon,target\n";
    for (const auto& [id, s] : sums) {
      const auto& sub = *roster_.find(id)->subscores;
      csv += id;
      for (double v : sub) csv += "," + numeric::format_shortest(v);
      csv += "," + numeric::format_shortest(rating_to_target(s.first / s.second, kRatingMin, kRatingMax)) + "\n";
    }
    return {200, "text/csv", csv};
  }

  /// Registers the API routes. A non-empty `static_dir` is served at / for
  /// the browser UI.
  void install(httplib::Server& server, const fs::path& static_dir = {}) {
    if (!static_dir.empty() && !server.set_mount_point("/", static_dir.string())) {
      throw AnnotationError(AnnotationError::Kind::Io, "cannot serve UI files from " + static_dir.string());
    }
    auto send = [](httplib::Response& res, const HttpReply& r) {
      res.status = r.status;
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_content(r.body, r.content_type);
    };
    server.Get("/clips", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, list_clips(req.get_param_value("annotator")));
    });
    // Clip ids contain slashes, so the audio route matches greedily.
    server.Get(R"(/clips/(.+)/audio)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, clip_audio(req.matches[1].str()));
    });
    server.Post("/ratings", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, post_rating(req.body));
    });
    server.Get("/agreement", [this, send](const httplib::Request&, httplib::Response& res) { send(res, agreement()); });
    server.Get("/export", [this, send](const httplib::Request&, httplib::Response& res) { send(res, export_csv()); });
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
  }

 private:
  static HttpReply error(int status, const std::string& message) {
    return {status, "application/json", nlohmann::json{{"error", message}}.dump()};
  }

  Roster roster_;
  RatingStore store_;
};

}  // namespace exprscore
