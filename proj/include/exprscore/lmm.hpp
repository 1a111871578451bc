#pragma once

// HTTP client for a multimodal language model acting as a prosody rater.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "exprscore/audio.hpp"
#include "exprscore/external.hpp"
#include "exprscore/scorers.hpp"

namespace exprscore {

/// Prompt text with an optional leading `scale: lo..hi` line. Placeholders
/// of the form {{name}} are substituted at render time.
struct PromptTemplate {
  double scale_lo = 1.0;
  double scale_hi = 10.0;
  std::string body;

  std::string render(const std::map<std::string, std::string>& vars) const {
    std::string out = body;
    for (const auto& [name, value] : vars) {
      const std::string key = "{{" + name + "}}";
      for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
        out.replace(pos, key.size(), value);
      }
    }
    return out;
  }
};

inline PromptTemplate parse_prompt_template(const std::string& text) {
  PromptTemplate t;
  static const std::regex header(R"(^\s*scale:\s*([-+]?\d+(?:\.\d+)?)\s*\.\.\s*([-+]?\d+(?:\.\d+)?)\s*$)");
  const auto nl = text.find('\n');
  const std::string first = text.substr(0, nl);
  std::smatch m;
  if (std::regex_match(first, m, header)) {
    t.scale_lo = std::stod(m[1].str());
    t.scale_hi = std::stod(m[2].str());
    t.body = nl == std::string::npos ? "" : text.substr(nl + 1);
  } else {
    t.body = text;
  }
  if (!(t.scale_hi > t.scale_lo)) throw ScorerError(ScorerError::Kind::InvalidConfig, "prompt scale is empty");
  return t;
}

inline PromptTemplate load_prompt_template(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScorerError(ScorerError::Kind::InvalidConfig, "cannot open prompt template " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_prompt_template(buf.str());
}

inline PromptTemplate default_prosody_prompt() {
  return parse_prompt_template(
      "scale: 1..10\n"
      "Listen to the attached recording ({{clip_id}}). Rate how rich and varied its prosody is: pitch movement, "
      "rhythm and loudness changes. Answer with a single number from {{scale_lo}} to {{scale_hi}}.\n");
}

struct LmmConfig {
  std::string endpoint;  // http://host:port/path
  std::string credential_env = "EXPRSCORE_LMM_API_KEY";
  std::chrono::milliseconds timeout{30000};
  int max_attempts = 3;
  std::chrono::milliseconds backoff{250};  // doubled after each failed attempt
};

struct LmmRating {
  double score = 0.0;   // 0-100
  double rating = 0.0;  // on the template scale
  std::string raw_response;
  int attempts = 0;
};

/// First number in a rater reply. JSON replies are searched in their
/// "rating" or "text" field; anything else is searched as plain text.
inline std::optional<double> extract_rating(const std::string& body) {
  std::string text = body;
  try {
    const auto j = nlohmann::json::parse(body);
    if (j.is_number()) return j.get<double>();
    if (j.is_object()) {
      for (const char* key : {"rating", "text"}) {
        if (!j.contains(key)) continue;
        if (j[key].is_number()) return j[key].get<double>();
        if (j[key].is_string()) {
          text = j[key].get<std::string>();
          break;
        }
      }
    }
  } catch (const nlohmann::json::exception&) {
  }
  static const std::regex number(R"([-+]?\d+(?:\.\d+)?)");
  std::smatch m;
  if (!std::regex_search(text, m, number)) return std::nullopt;
  return std::stod(m[0].str());
}

class LmmAnnotator {
 public:
  LmmAnnotator(LmmConfig config, PromptTemplate prompt) : config_(std::move(config)), prompt_(std::move(prompt)) {
    std::tie(base_, path_) = split_url(config_.endpoint);
    if (config_.max_attempts < 1) throw ScorerError(ScorerError::Kind::InvalidConfig, "max_attempts must be >= 1");
  }

  const PromptTemplate& prompt() const noexcept { return prompt_; }

  LmmRating rate(const std::string& clip_id, const std::filesystem::path& audio_path) const {
    using Kind = ScorerError::Kind;
    std::vector<std::uint8_t> audio;
    try {
      audio = read_file_bytes(audio_path);
    } catch (const AudioError& e) {
      throw ScorerError(Kind::AnnotatorUnavailable, e.what());
    }
    const std::string prompt_text = prompt_.render(
        {{"clip_id", clip_id}, {"scale_lo", format_number(prompt_.scale_lo)}, {"scale_hi", format_number(prompt_.scale_hi)}});
    const httplib::MultipartFormDataItems items{
        {"audio", std::string(audio.begin(), audio.end()), audio_path.filename().string(), "audio/wav"},
        {"prompt", prompt_text, "", "text/plain"},
    };
    httplib::Headers headers;
    if (const char* key = std::getenv(config_.credential_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    std::string last_error;
    auto wait = config_.backoff;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
      if (attempt > 1) {
        std::this_thread::sleep_for(wait);
        wait *= 2;
      }
      httplib::Client client(base_);
      client.set_connection_timeout(config_.timeout);
      client.set_read_timeout(config_.timeout);
      client.set_write_timeout(config_.timeout);
      const auto res = client.Post(path_, headers, items);
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw ScorerError(Kind::AnnotatorUnavailable, "annotator rejected request: HTTP " + std::to_string(res->status));
      }
      LmmRating out;
      out.raw_response = res->body;
      out.attempts = attempt;
      const auto rating = extract_rating(res->body);
      if (!rating) throw ScorerError(Kind::UnparseableResponse, "no rating in annotator reply: " + res->body);
      if (!(*rating >= prompt_.scale_lo && *rating <= prompt_.scale_hi)) {
        throw ScorerError(Kind::RatingOutOfScale, "annotator rating " + format_number(*rating) + " outside " +
                                                      format_number(prompt_.scale_lo) + ".." +
                                                      format_number(prompt_.scale_hi));
      }
      out.rating = *rating;
      out.score = (*rating - prompt_.scale_lo) / (prompt_.scale_hi - prompt_.scale_lo) * 100.0;
      return out;
    }
    throw ScorerError(Kind::AnnotatorUnavailable, "annotator unavailable after " +
                                                      std::to_string(config_.max_attempts) + " attempts: " + last_error);
  }

 private:
  static std::string format_number(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  }

  LmmConfig config_;
  PromptTemplate prompt_;
  std::string base_;
  std::string path_;
};

inline LmmRating score_prosody_via_lmm(const std::string& clip_id, const std::filesystem::path& audio,
                                       const LmmAnnotator& annotator) {
  return annotator.rate(clip_id, audio);
}

}  // namespace exprscore
