#include <catch_amalgamated.hpp>

#include <chrono>
#include <fstream>
#include <sstream>

#include "exprscore/pipeline.hpp"
#include "exprscore/synth.hpp"
#include "http_fixture.hpp"
#include "test_util.hpp"

using namespace exprscore;
using Catch::Approx;

namespace {

// s_spon spread over [0, 100) by a stable hash of the unit id.
class HashProvider : public SubScoreProvider {
 public:
  SubScores score(const ClipContext& ctx) override {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : ctx.id) h = (h ^ c) * 1099511628211ull;
    SubScores s;
    s.s_emo = 40.0;
    s.s_pros = 60.0;
    s.s_spon = static_cast<double>(h % 1000) / 10.0;
    ++calls;
    return s;
  }
  std::atomic<int> calls{0};
};

// Staircase on s_spon: <25 -> 10, <50 -> 40, <75 -> 63.5, else 90.
FusionModel staircase() {
  std::vector<TreeNode> nodes(7);
  nodes[0] = {2, 50.0, 1, 4, 0.0};
  nodes[1] = {2, 25.0, 2, 3, 0.0};
  nodes[2].value = 10.0;
  nodes[3].value = 40.0;
  nodes[4] = {2, 75.0, 5, 6, 0.0};
  nodes[5].value = 63.5;
  nodes[6].value = 90.0;
  FusionModel m;
  m.base_score = 0.0;
  m.shrinkage = 1.0;
  m.max_depth = 2;
  m.trees.emplace_back(std::move(nodes));
  return m;
}

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

struct Corpus {
  fs::path dir;
  CorpusConfig cfg;
};

Corpus make_corpus(const std::string& name, int clips, double seconds = 2.0, bool corrupt = true) {
  Corpus c;
  c.dir = testutil::temp_dir(name);
  const auto a = c.dir / "root_a";
  const auto b = c.dir / "root_b" / "nested";
  fs::create_directories(a);
  fs::create_directories(b);
  synth::SpeechStyle style;
  for (int i = 0; i < clips; ++i) {
    style.pitch_span_st = 1.0 + (i % 7);
    const auto dir = i % 2 == 0 ? a : b;
    write_wav(dir / ("clip" + std::to_string(i) + ".wav"),
              synth::clip(synth::speechlike(style, seconds, 500 + static_cast<std::uint64_t>(i))));
  }
  if (corrupt) {
    std::ofstream(a / "broken.wav", std::ios::binary) << "RIFF\x10\0\0\0WAVEnot really";
  }
  c.cfg.roots = {{"a", a, 5, "en"}, {"b", c.dir / "root_b", 3, "zh"}};
  c.cfg.manifest = c.dir / "out" / "manifest.jsonl";
  c.cfg.work_dir = c.dir / "work";
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::set<std::string> selected_ids(const CurationResult& r) {
  std::set<std::string> out;
  for (const auto& e : r.entries) {
    if (e.selected) out.insert(e.id);
  }
  return out;
}

}  // namespace

TEST_CASE("corpus config parses roots, backends and resolves relative paths") {
  const auto j = nlohmann::json::parse(R"({
    "roots": [{"path": "data/a", "base_level": 7, "language": "en", "name": "ra"}],
    "sidecar": "q.csv",
    "backends": {"emotion": {"kind": "process", "command": ["scorer", "--x"], "timeout_ms": 500},
                 "prosody": {"kind": "lmm", "endpoint": "http://127.0.0.1:9/rate"}},
    "threshold": 70, "fusion_model": "m.json", "threads": 3,
    "segment": {"min_utterance_s": 2.0},
    "asr": {"endpoint": "http://127.0.0.1:9/asr"}
  })");
  const auto c = corpus_config_from_json(j, "/base");
  REQUIRE(c.roots.size() == 1);
  CHECK(c.roots[0].path == fs::path("/base/data/a"));
  CHECK(c.roots[0].base_level == 7);
  CHECK(c.roots[0].name == "ra");
  CHECK(*c.sidecar == fs::path("/base/q.csv"));
  CHECK(c.emotion.kind == "process");
  CHECK(c.emotion.command == std::vector<std::string>{"scorer", "--x"});
  CHECK(c.emotion.timeout_ms == 500);
  CHECK(c.prosody.kind == "lmm");
  CHECK(c.spontaneity.kind == "native");
  CHECK(c.threshold == 70.0);
  CHECK(c.threads == 3);
  CHECK(c.segment.enabled);
  CHECK(c.segment.min_utterance_s == 2.0);
  CHECK(c.asr->endpoint == "http://127.0.0.1:9/asr");
  CHECK(*c.fusion_model == fs::path("/base/m.json"));

  const auto defaults = corpus_config_from_json(nlohmann::json::parse(R"({"roots":[{"path":"/x","base_level":1}]})"));
  CHECK(defaults.threshold == kDefaultThreshold);
  CHECK_FALSE(defaults.segment.enabled);
}

TEST_CASE("corpus config rejects invalid settings") {
  auto bad = [](const char* text) {
    try {
      corpus_config_from_json(nlohmann::json::parse(text));
    } catch (const PipelineError& e) {
      return e.kind() == PipelineError::Kind::InvalidConfig;
    }
    return false;
  };
  CHECK(bad(R"({"roots": []})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 4}]})"));
  CHECK(bad(R"({"roots": [{"path": "/x"}]})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 1}], "threshold": 120})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 1}], "backends": {"emotion": "lmm"}})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 1}], "backends": {"prosody": {"kind": "process"}}})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 1}], "backends": {"prosody": "telepathy"}})"));
  CHECK(bad(R"({"roots": [{"path": "/x", "base_level": 1, "name": "r"}, {"path": "/y", "base_level": 1, "name": "r"}]})"));
}

TEST_CASE("curation over a mixed corpus records errors and keeps going") {
  auto c = make_corpus("pipeline_mixed", 50);
  HashProvider provider;
  const auto model = staircase();
  CurationHooks hooks{&provider, &model, nullptr, fixed_clock};

  const auto r = curate(c.cfg, hooks);
  REQUIRE(r.entries.size() == 51);
  CHECK(provider.calls == 50);
  CHECK(std::is_sorted(r.entries.begin(), r.entries.end(), [](const auto& x, const auto& y) { return x.id < y.id; }));
  const auto broken = std::find_if(r.entries.begin(), r.entries.end(), [](const auto& e) { return e.id == "a/broken"; });
  REQUIRE(broken != r.entries.end());
  CHECK(broken->error.has_value());
  CHECK_FALSE(broken->selected);
  CHECK(r.summary.errors == 1);
  CHECK(r.summary.entries == 51);

  for (const auto& e : r.entries) {
    if (e.error) continue;
    CHECK(e.selected == (*e.s_expr >= c.cfg.threshold));
    CHECK(e.quality->source == QualitySource::Estimated);
    CHECK(e.base_level == (e.root == "a" ? 5 : 3));
    CHECK(e.language == (e.root == "a" ? "en" : "zh"));
  }
  // Nested directories keep their relative path in the id.
  CHECK(std::any_of(r.entries.begin(), r.entries.end(), [](const auto& e) { return e.id == "b/nested/clip1"; }));

  write_curation(r, c.cfg.manifest);
  std::ifstream in(c.cfg.manifest);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("schema_version") == kManifestSchemaVersion);
    if (j.contains("error")) CHECK(j.at("selected") == false);
    else {
      CHECK(j.at("transcript").is_null());
      CHECK(j.at("scores").at("provenance").at("s_spon") == "heuristic");
    }
    ++lines;
  }
  CHECK(lines == 51);

  const auto summary = nlohmann::json::parse(slurp(summary_path_for(c.cfg.manifest)));
  CHECK(summary.at("generated_at") == "2026-01-01T00:00:00Z");
  CHECK(summary.at("selected") == r.summary.selected);
  double ratio_sum = 0.0;
  for (const auto& [lang, v] : summary.at("language_ratio").items()) ratio_sum += v.get<double>();
  if (r.summary.selected > 0) CHECK(ratio_sum == Approx(1.0));
}

TEST_CASE("rerunning curation reproduces the manifest byte for byte") {
  auto c = make_corpus("pipeline_rerun", 20);
  HashProvider provider;
  const auto model = staircase();
  CurationHooks hooks{&provider, &model, nullptr, fixed_clock};

  write_curation(curate(c.cfg, hooks), c.cfg.manifest);
  const auto first = slurp(c.cfg.manifest);
  const auto first_summary = slurp(summary_path_for(c.cfg.manifest));

  c.cfg.threads = 4;
  write_curation(curate(c.cfg, hooks), c.cfg.manifest);
  CHECK(slurp(c.cfg.manifest) == first);
  CHECK(slurp(summary_path_for(c.cfg.manifest)) == first_summary);
}

TEST_CASE("selection is inclusive at the threshold and monotone in it") {
  auto c = make_corpus("pipeline_threshold", 40, 1.5, false);
  HashProvider provider;
  const auto model = staircase();
  CurationHooks hooks{&provider, &model, nullptr, fixed_clock};

  c.cfg.threshold = 63.5;
  const auto at = curate(c.cfg, hooks);
  bool saw_boundary = false;
  for (const auto& e : at.entries) {
    if (*e.s_expr == 63.5) {
      saw_boundary = true;
      CHECK(e.selected);
    }
  }
  CHECK(saw_boundary);

  std::set<std::string> previous;
  bool first = true;
  for (double tau : {0.0, 10.0, 10.5, 40.0, 63.4, 63.5, 63.6, 90.0, 99.9, 100.0}) {
    c.cfg.threshold = tau;
    const auto ids = selected_ids(curate(c.cfg, hooks));
    if (!first) CHECK(std::includes(previous.begin(), previous.end(), ids.begin(), ids.end()));
    previous = ids;
    first = false;
  }
}

TEST_CASE("a threshold of 100 selects nothing when no clip scores 100") {
  auto c = make_corpus("pipeline_tau100", 12, 1.5);
  HashProvider provider;
  const auto model = staircase();
  c.cfg.threshold = 100.0;
  const auto r = curate(c.cfg, {&provider, &model, nullptr, fixed_clock});
  CHECK(selected_ids(r).empty());
  CHECK(r.summary.selected == 0);
  CHECK_FALSE(r.summary.mean_s_expr_selected.has_value());
  CHECK(to_json(r.summary).at("mean_s_expr_selected").is_null());
  CHECK(r.summary.selected_hours == 0.0);
}

TEST_CASE("curation without a fusion model aborts") {
  auto c = make_corpus("pipeline_nomodel", 2, 1.0, false);
  try {
    curate(c.cfg);
    FAIL("expected NoFusionModel");
  } catch (const PipelineError& e) {
    CHECK(e.kind() == PipelineError::Kind::NoFusionModel);
  }
  std::ofstream(c.dir / "bad_model.json") << "{\"format\": \"something else\"}";
  c.cfg.fusion_model = c.dir / "bad_model.json";
  try {
    curate(c.cfg);
    FAIL("expected NoFusionModel");
  } catch (const PipelineError& e) {
    CHECK(e.kind() == PipelineError::Kind::NoFusionModel);
  }
}

TEST_CASE("native scoring end to end with a model file and sidecar quality") {
  auto c = make_corpus("pipeline_native", 6, 2.0, false);
  save_model(staircase(), c.dir / "model.json");
  c.cfg.fusion_model = c.dir / "model.json";
  std::ofstream(c.dir / "quality.csv") << "id,ovrl,sig,bak,p808\na/clip0,4.2,4.4,4.6,4.1\n";
  c.cfg.sidecar = c.dir / "quality.csv";

  const auto r = curate(c.cfg, {nullptr, nullptr, nullptr, fixed_clock});
  REQUIRE(r.entries.size() == 6);
  for (const auto& e : r.entries) {
    REQUIRE_FALSE(e.error);
    CHECK(e.scores->emo_source == Provenance::NativeProxy);
    CHECK(e.scores->pros_source == Provenance::NativeProxy);
    CHECK(e.scores->spon_source == Provenance::Heuristic);
    CHECK(e.scores->valid());
    if (e.id == "a/clip0") {
      CHECK(e.quality->source == QualitySource::Sidecar);
      CHECK(e.quality->bak == 4.6);
      // Hyper-clean at base level 5 lands in the punitive range [1, 1.5] * 10.
      CHECK(e.scores->s_spon >= 10.0);
      CHECK(e.scores->s_spon <= 15.0);
    } else {
      CHECK(e.quality->source == QualitySource::Estimated);
    }
  }
}

TEST_CASE("segmented units inherit parent sidecar quality and get segment ids") {
  const auto dir = testutil::temp_dir("pipeline_segments");
  fs::create_directories(dir / "r");
  synth::SpeechStyle style;
  style.pause_prob = 0.0;
  const auto speech = synth::speechlike(style, 1.6, 7);
  write_wav(dir / "r" / "long.wav", synth::clip(synth::concat({speech, synth::silence(0.8), speech, synth::silence(0.8), speech})));
  std::ofstream(dir / "q.csv") << "id,ovrl,sig,bak,p808\nr/long,3.0,3.1,3.2,3.3\nr/long_seg001,2.0,2.1,2.2,2.3\n";

  CorpusConfig cfg;
  cfg.roots = {{"r", dir / "r", 9, "en"}};
  cfg.sidecar = dir / "q.csv";
  cfg.segment.enabled = true;
  HashProvider provider;
  const auto model = staircase();
  const auto r = curate(cfg, {&provider, &model, nullptr, fixed_clock});
  REQUIRE(r.entries.size() == 3);
  CHECK(r.entries[0].id == "r/long_seg000");
  CHECK(r.entries[1].id == "r/long_seg001");
  CHECK(r.entries[2].id == "r/long_seg002");
  CHECK(r.entries[0].quality->ovrl == 3.0);
  CHECK(r.entries[1].quality->ovrl == 2.0);
  for (const auto& e : r.entries) {
    REQUIRE(e.start_s.has_value());
    CHECK(*e.end_s - *e.start_s == Approx(e.duration_s));
    CHECK(e.duration_s > 1.0);
  }
  CHECK(*r.entries[0].start_s < *r.entries[1].start_s);
}

TEST_CASE("ASR transcripts fill the manifest and a dead service only warns") {
  testutil::LocalServer srv;
  std::atomic<int> calls{0};
  srv.server.Post("/asr", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    const auto clip = decode_wav(std::span(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()));
    res.set_content(nlohmann::json{{"text", "heard " + std::to_string(clip.size())}}.dump(), "application/json");
  });
  srv.server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  srv.start();

  auto c = make_corpus("pipeline_asr", 4, 1.0, false);
  HashProvider provider;
  const auto model = staircase();
  c.cfg.asr = AsrConfig{srv.url("/asr"), 5000};
  auto r = curate(c.cfg, {&provider, &model, nullptr, fixed_clock});
  CHECK(calls == 4);
  for (const auto& e : r.entries) {
    REQUIRE(e.transcript.has_value());
    CHECK(*e.transcript == "heard 16000");
    CHECK(e.warnings.empty());
  }

  for (const auto& path : {srv.url("/broken"), std::string("http://127.0.0.1:1/asr")}) {
    c.cfg.asr = AsrConfig{path, 2000};
    r = curate(c.cfg, {&provider, &model, nullptr, fixed_clock});
    for (const auto& e : r.entries) {
      CHECK_FALSE(e.error);
      CHECK_FALSE(e.transcript.has_value());
      REQUIRE(e.warnings.size() == 1);
      CHECK(e.warnings[0].rfind("untranscribed", 0) == 0);
    }
  }
}

TEST_CASE("benchmark reproduces the published system ranking") {
  const fs::path dir = fs::path(EXPRSCORE_SOURCE_DIR) / "tests" / "fixtures" / "s2s_systems";
  auto systems = load_systems_dir(dir / "systems");
  REQUIRE(systems.size() == 7);
  const auto human = load_human_scores(dir / "human.csv");
  const auto report = benchmark(systems, human);

  const std::map<std::string, double> expected{{"Doubao", 1},       {"Grok-4 Voice", 2}, {"GPT-4o Audio", 4},
                                               {"Sesame", 3},       {"Step Audio 2", 5}, {"Qwen2.5-Omni", 7},
                                               {"Gemini-2.5 Pro", 6}};
  for (const auto& s : report.systems) {
    CHECK(s.rank == expected.at(s.name));
    CHECK(s.utterances == 20);
  }
  REQUIRE(report.srcc.has_value());
  CHECK(*report.srcc == Approx(1.0 - 24.0 / 336.0).margin(1e-12));
  CHECK(*report.srcc == Approx(0.9286).margin(5e-5));

  // Means do not depend on the order systems or utterances arrive in.
  std::reverse(systems.begin(), systems.end());
  for (auto& s : systems) std::reverse(s.utterances.begin(), s.utterances.end());
  const auto again = benchmark(systems, human);
  CHECK(*again.srcc == *report.srcc);
  for (const auto& s : again.systems) CHECK(s.rank == expected.at(s.name));
}

TEST_CASE("benchmark ties share the average rank") {
  auto sys = [](std::string name, double v) {
    SystemScores s;
    s.name = std::move(name);
    s.utterances.push_back({"p1", {}, v});
    s.utterances.push_back({"p2", {}, v});
    return s;
  };
  const auto r = benchmark({sys("x", 50.0), sys("y", 50.0), sys("z", 10.0)});
  CHECK(r.systems[0].rank == 1.5);
  CHECK(r.systems[1].rank == 1.5);
  CHECK(r.systems[2].rank == 3.0);
  CHECK_FALSE(r.srcc.has_value());
}

TEST_CASE("benchmark rejects mismatched prompts, lone systems and missing human scores") {
  auto sys = [](std::string name, std::vector<std::string> prompts) {
    SystemScores s;
    s.name = std::move(name);
    for (auto& p : prompts) s.utterances.push_back({p, {}, 50.0});
    return s;
  };
  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const PipelineError& e) {
      return e.kind();
    }
    return PipelineError::Kind::Io;
  };
  using K = PipelineError::Kind;
  CHECK(kind_of([&] { benchmark({sys("a", {"p1", "p2"}), sys("b", {"p1", "p3"})}); }) == K::PromptSetMismatch);
  CHECK(kind_of([&] { benchmark({sys("a", {"p1", "p2"}), sys("b", {"p1"})}); }) == K::PromptSetMismatch);
  CHECK(kind_of([&] { benchmark({sys("a", {"p1"})}); }) == K::TooFewSystems);
  CHECK(kind_of([&] {
          benchmark({sys("a", {"p1"}), sys("b", {"p1"})}, std::map<std::string, double>{{"a", 1.0}});
        }) == K::MissingHumanScore);
  // Same prompts in a different order are fine.
  CHECK_NOTHROW(benchmark({sys("a", {"p2", "p1"}), sys("b", {"p1", "p2"})}));
}

TEST_CASE("native curation keeps up with 100 ten-second clips per minute") {
  const auto dir = testutil::temp_dir("pipeline_throughput");
  fs::create_directories(dir / "r");
  synth::SpeechStyle style;
  for (int i = 0; i < 100; ++i) {
    style.pitch_span_st = 1.0 + (i % 9);
    write_wav(dir / "r" / ("c" + std::to_string(i) + ".wav"),
              synth::clip(synth::speechlike(style, 10.0, 9000 + static_cast<std::uint64_t>(i))));
  }
  CorpusConfig cfg;
  cfg.roots = {{"r", dir / "r", 5, "en"}};
  const auto model = staircase();
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = curate(cfg, {nullptr, &model, nullptr, fixed_clock});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  WARN("100 x 10 s clips curated in " << secs << " s");
  CHECK(r.entries.size() == 100);
  CHECK(r.summary.errors == 0);
  CHECK(secs < 60.0);
}
