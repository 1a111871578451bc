#pragma once

// Clients for sub-scores computed outside this library: a long-running
// scorer process speaking line-delimited JSON, or an HTTP endpoint taking the
// same request document.

#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "exprscore/scorers.hpp"

namespace exprscore {

struct ScoreRequest {
  std::string id;
  std::filesystem::path audio_path;
  Dimension dimension = Dimension::Emotion;
};

inline nlohmann::json to_json(const ScoreRequest& r) {
  return {{"id", r.id}, {"audio_path", r.audio_path.string()}, {"dimension", to_string(r.dimension)}};
}

/// Validates a scorer response line against the request id.
inline double parse_score_response(const std::string& text, const std::string& expected_id) {
  using Kind = ScorerError::Kind;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw ScorerError(Kind::ProtocolViolation, "scorer response is not JSON: " + text);
  }
  if (!j.is_object() || !j.contains("id") || !j.contains("score")) {
    throw ScorerError(Kind::ProtocolViolation, "scorer response lacks id or score");
  }
  if (!j["id"].is_string() || j["id"].get<std::string>() != expected_id) {
    throw ScorerError(Kind::ProtocolViolation, "scorer response id does not match request " + expected_id);
  }
  if (!j["score"].is_number()) throw ScorerError(Kind::ProtocolViolation, "scorer score is not a number");
  const double score = j["score"].get<double>();
  if (!(score >= 0.0 && score <= 100.0)) {
    throw ScorerError(Kind::ScoreOutOfRange, "scorer returned " + std::to_string(score) + " outside [0, 100]");
  }
  return score;
}

class ExternalScorer {
 public:
  virtual ~ExternalScorer() = default;
  virtual double score(const ScoreRequest& request) = 0;
};

/// Spawns `argv` once and exchanges one JSON line per request over its
/// stdin/stdout. Requests are serialized; a timed-out or crashed process is
/// killed and respawned on the next request.
class ProcessScorer : public ExternalScorer {
 public:
  ProcessScorer(std::vector<std::string> argv, std::chrono::milliseconds deadline)
      : argv_(std::move(argv)), deadline_(deadline) {
    if (argv_.empty()) throw ScorerError(ScorerError::Kind::InvalidConfig, "scorer command is empty");
    // Writes to a dead child must surface as EPIPE rather than kill us.
    struct sigaction current {};
    if (sigaction(SIGPIPE, nullptr, &current) == 0 && current.sa_handler == SIG_DFL) std::signal(SIGPIPE, SIG_IGN);
  }

  ProcessScorer(const ProcessScorer&) = delete;
  ProcessScorer& operator=(const ProcessScorer&) = delete;
  ~ProcessScorer() override { stop(); }

  double score(const ScoreRequest& request) override {
    std::lock_guard lock(mu_);
    if (pid_ <= 0) start();
    const std::string line = to_json(request).dump() + "\n";
    if (!write_all(line)) {
      stop();
      throw ScorerError(ScorerError::Kind::ScorerUnavailable, "scorer process is not accepting requests");
    }
    return parse_score_response(read_line(), request.id);
  }

 private:
  void start() {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0) throw ScorerError(ScorerError::Kind::ScorerUnavailable, "pipe failed");
    if (pipe(out_pipe) != 0) {
      close(in_pipe[0]);
      close(in_pipe[1]);
      throw ScorerError(ScorerError::Kind::ScorerUnavailable, "pipe failed");
    }
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);
    const pid_t pid = fork();
    if (pid < 0) throw ScorerError(ScorerError::Kind::ScorerUnavailable, "fork failed");
    if (pid == 0) {
      dup2(in_pipe[0], STDIN_FILENO);
      dup2(out_pipe[1], STDOUT_FILENO);
      close(in_pipe[0]);
      close(in_pipe[1]);
      close(out_pipe[0]);
      close(out_pipe[1]);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    buffer_.clear();
  }

  void stop() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      kill(pid_, SIGKILL);
      waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
  }

  bool write_all(const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = write(to_child_, data.data() + off, data.size() - off);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return false;
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  std::string read_line() {
    const auto until = std::chrono::steady_clock::now() + deadline_;
    while (true) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::ceil<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
      if (left.count() <= 0) {
        stop();
        throw ScorerError(ScorerError::Kind::ScorerUnavailable,
                          "scorer did not answer within " + std::to_string(deadline_.count()) + " ms");
      }
      pollfd pfd{from_child_, POLLIN, 0};
      const int ready = poll(&pfd, 1, static_cast<int>(left.count()));
      if (ready < 0 && errno == EINTR) continue;
      if (ready <= 0) continue;
      char chunk[4096];
      const ssize_t n = read(from_child_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        stop();
        throw ScorerError(ScorerError::Kind::ScorerUnavailable, "scorer process exited");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::vector<std::string> argv_;
  std::chrono::milliseconds deadline_;
  std::mutex mu_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

/// Splits "http://host:port/path" into the scheme-host-port part and path.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (scheme == std::string::npos) {
    throw ScorerError(ScorerError::Kind::InvalidConfig, "endpoint must be an http:// URL: " + url);
  }
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

/// POSTs the request document to an HTTP endpoint.
class HttpScorer : public ExternalScorer {
 public:
  HttpScorer(const std::string& url, std::chrono::milliseconds deadline) : deadline_(deadline) {
    std::tie(base_, path_) = split_url(url);
  }

  double score(const ScoreRequest& request) override {
    httplib::Client client(base_);
    client.set_connection_timeout(deadline_);
    client.set_read_timeout(deadline_);
    client.set_write_timeout(deadline_);
    const auto res = client.Post(path_, to_json(request).dump(), "application/json");
    if (!res) {
      throw ScorerError(ScorerError::Kind::ScorerUnavailable,
                        "scorer endpoint unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw ScorerError(ScorerError::Kind::ScorerUnavailable, "scorer endpoint returned HTTP " +
                                                                  std::to_string(res->status));
    }
    return parse_score_response(res->body, request.id);
  }

 private:
  std::string base_;
  std::string path_;
  std::chrono::milliseconds deadline_;
};

/// Memoizes scores by (clip id, dimension).
class CachedScorer : public ExternalScorer {
 public:
  explicit CachedScorer(std::shared_ptr<ExternalScorer> inner) : inner_(std::move(inner)) {}

  double score(const ScoreRequest& request) override {
    const auto key = std::make_pair(request.id, request.dimension);
    {
      std::lock_guard lock(mu_);
      if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    const double s = inner_->score(request);
    std::lock_guard lock(mu_);
    cache_.emplace(key, s);
    return s;
  }

  std::size_t cached() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  std::shared_ptr<ExternalScorer> inner_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, Dimension>, double> cache_;
};

inline double score_via_external(const std::string& clip_id, const std::filesystem::path& audio, Dimension dimension,
                                 ExternalScorer& scorer) {
  return scorer.score({clip_id, audio, dimension});
}

}  // namespace exprscore
