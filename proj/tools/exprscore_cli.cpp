// exprscore: score clips, curate corpora, benchmark systems, train the fusion
// model and run the rating service.
//
// Exit codes: 0 success, 2 input error, 3 config or missing-model error.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "exprscore/annotation.hpp"
#include "exprscore/numeric.hpp"
#include "exprscore/pipeline.hpp"

using namespace exprscore;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitConfig = 3;

struct Globals {
  std::string config;
  bool json = false;
  int threads = 0;  // 0 = take the config value
};

// Thrown for problems the CLI itself detects.
struct CliFailure {
  int code;
  std::string message;
};

int exit_code_for(const std::exception& e) {
  if (const auto* p = dynamic_cast<const PipelineError*>(&e)) {
    using K = PipelineError::Kind;
    return p->kind() == K::InvalidConfig || p->kind() == K::NoFusionModel ? kExitConfig : kExitInput;
  }
  if (const auto* f = dynamic_cast<const FusionError*>(&e)) {
    using K = FusionError::Kind;
    return f->kind() == K::InvalidParams || f->kind() == K::VersionMismatch || f->kind() == K::CorruptModel
               ? kExitConfig
               : kExitInput;
  }
  if (const auto* s = dynamic_cast<const ScorerError*>(&e)) {
    using K = ScorerError::Kind;
    return s->kind() == K::InvalidCalibration || s->kind() == K::InvalidConfig || s->kind() == K::InvalidBaseLevel
               ? kExitConfig
               : kExitInput;
  }
  return kExitInput;
}

std::string fmt(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

CorpusConfig scoring_config(const Globals& g) {
  if (g.config.empty()) {
    CorpusConfig c;
    c.validate(false);
    return c;
  }
  return load_corpus_config(g.config, false);
}

FusionModel resolve_model(const std::string& flag, const CorpusConfig& cfg) {
  fs::path path;
  if (!flag.empty()) path = flag;
  else if (cfg.fusion_model) path = *cfg.fusion_model;
  else if (const char* env = std::getenv("EXPRSCORE_FUSION_MODEL"); env && *env) path = env;
  else throw CliFailure{kExitConfig, "no fusion model: pass --model, set fusion_model in the config or EXPRSCORE_FUSION_MODEL"};
  try {
    return load_model(path);
  } catch (const FusionError& e) {
    throw CliFailure{kExitConfig, std::string("fusion model unusable: ") + e.what()};
  }
}

ScorerCalibration resolve_calibration(const CorpusConfig& cfg) {
  return cfg.calibration ? load_calibration(*cfg.calibration) : default_calibration();
}

struct InputFile {
  std::string id;
  fs::path path;
};

// Files are taken as given (id = stem); directories contribute every WAV
// beneath them (id = relative path without extension).
std::vector<InputFile> expand_inputs(const std::vector<std::string>& args, std::vector<std::string>& problems) {
  std::vector<InputFile> out;
  for (const auto& a : args) {
    const fs::path p(a);
    if (fs::is_directory(p)) {
      std::vector<InputFile> found;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (ext != ".wav") continue;
        auto rel = fs::relative(e.path(), p);
        rel.replace_extension();
        found.push_back({rel.generic_string(), e.path()});
      }
      std::sort(found.begin(), found.end(), [](const auto& x, const auto& y) { return x.id < y.id; });
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      out.push_back({p.stem().string(), p});
    } else {
      problems.push_back(a + ": no such file or directory");
    }
  }
  return out;
}

void print_error_line(const Globals& g, const std::string& id, const std::string& message) {
  if (g.json) std::cerr << nlohmann::json{{"id", id}, {"error", message}}.dump() << "\n";
  else std::cerr << "error: " << id << ": " << message << "\n";
}

// --- score -----------------------------------------------------------------

struct ScoreArgs {
  std::vector<std::string> inputs;
  std::string model;
  std::string quality;
  int base_level = 5;
};

int run_score(const Globals& g, const ScoreArgs& a) {
  const auto cfg = scoring_config(g);
  if (!is_valid_base_level(a.base_level)) throw CliFailure{kExitConfig, "--base-level must be one of 1,3,5,7,9"};
  const auto model = resolve_model(a.model, cfg);
  ConfiguredProvider provider(cfg, resolve_calibration(cfg));
  std::map<std::string, QualityMetrics> sidecar;
  if (!a.quality.empty()) sidecar = load_sidecar(a.quality);
  else if (cfg.sidecar) sidecar = load_sidecar(*cfg.sidecar);

  std::vector<std::string> problems;
  const auto files = expand_inputs(a.inputs, problems);
  for (const auto& p : problems) print_error_line(g, p.substr(0, p.find(':')), p.substr(p.find(':') + 2));

  struct Row {
    std::optional<SubScores> scores;
    double s_expr = 0.0;
    std::string error;
  };
  std::vector<Row> rows(files.size());
  parallel_for(files.size(), g.threads > 0 ? g.threads : cfg.threads, [&](std::size_t i) {
    try {
      const auto clip = resample(read_wav(files[i].path, files[i].id), kCanonicalRate);
      const auto feats = analyze(clip);
      const auto summary = summarize(feats);
      ClipContext ctx;
      ctx.id = files[i].id;
      ctx.audio_path = files[i].path;
      ctx.clip = &clip;
      ctx.features = &summary;
      const auto it = sidecar.find(files[i].id);
      ctx.quality = it != sidecar.end() ? it->second : estimate_quality(clip, feats);
      ctx.base_level = a.base_level;
      rows[i].scores = provider.score(ctx);
      rows[i].s_expr = model.predict(*rows[i].scores);
    } catch (const std::exception& e) {
      rows[i].error = e.what();
    }
  });

  if (!g.json) std::cout << "id\ts_emo\ts_pros\ts_spon\ts_expr\n";
  bool failed = !problems.empty();
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& r = rows[i];
    if (!r.scores) {
      failed = true;
      print_error_line(g, files[i].id, r.error);
      continue;
    }
    if (g.json) {
      std::cout << nlohmann::json{{"id", files[i].id},
                                  {"s_emo", r.scores->s_emo},
                                  {"s_pros", r.scores->s_pros},
                                  {"s_spon", r.scores->s_spon},
                                  {"s_expr", r.s_expr}}
                       .dump()
                << "\n";
    } else {
      std::cout << files[i].id << "\t" << fmt(r.scores->s_emo) << "\t" << fmt(r.scores->s_pros) << "\t"
                << fmt(r.scores->s_spon) << "\t" << fmt(r.s_expr) << "\n";
    }
  }
  return failed ? kExitInput : kExitOk;
}

// --- estimate-quality ------------------------------------------------------

int run_estimate_quality(const Globals& g, const std::vector<std::string>& inputs) {
  std::vector<std::string> problems;
  const auto files = expand_inputs(inputs, problems);
  for (const auto& p : problems) print_error_line(g, p.substr(0, p.find(':')), p.substr(p.find(':') + 2));
  std::vector<std::optional<QualityMetrics>> out(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), std::max(1, g.threads), [&](std::size_t i) {
    try {
      out[i] = estimate_quality(resample(read_wav(files[i].path), kCanonicalRate));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  // Plain output doubles as a quality sidecar.
  if (!g.json) std::cout << "id,ovrl,sig,bak,p808\n";
  bool failed = !problems.empty();
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!out[i]) {
      failed = true;
      print_error_line(g, files[i].id, errors[i]);
      continue;
    }
    const auto& q = *out[i];
    if (g.json) {
      std::cout << nlohmann::json{{"id", files[i].id}, {"ovrl", q.ovrl}, {"sig", q.sig}, {"bak", q.bak}, {"p808", q.p808}}
                       .dump()
                << "\n";
    } else {
      std::cout << files[i].id << "," << fmt(q.ovrl, 3) << "," << fmt(q.sig, 3) << "," << fmt(q.bak, 3) << ","
                << fmt(q.p808, 3) << "\n";
    }
  }
  return failed ? kExitInput : kExitOk;
}

// --- curate ----------------------------------------------------------------

struct CurateArgs {
  std::optional<double> threshold;
  std::string manifest;
  std::string model;
};

int run_curate(const Globals& g, const CurateArgs& a) {
  if (g.config.empty()) throw CliFailure{kExitConfig, "curate needs --config"};
  auto cfg = load_corpus_config(g.config);
  if (a.threshold) cfg.threshold = *a.threshold;
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (!a.model.empty()) cfg.fusion_model = a.model;
  if (g.threads > 0) cfg.threads = g.threads;
  cfg.validate();

  const auto result = curate(cfg);
  write_curation(result, cfg.manifest);
  const auto& s = result.summary;
  if (g.json) {
    auto j = to_json(s);
    j["manifest"] = cfg.manifest.string();
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "manifest: " << cfg.manifest.string() << "\n"
              << "entries: " << s.entries << " (" << s.errors << " errors)\n"
              << "selected: " << s.selected << " at threshold " << fmt(cfg.threshold, 1) << ", "
              << fmt(s.selected_hours, 3) << " of " << fmt(s.total_hours, 3) << " h\n";
    if (s.mean_s_expr_selected) std::cout << "mean s_expr of selected: " << fmt(*s.mean_s_expr_selected) << "\n";
    for (const auto& [lang, share] : s.language_ratio) {
      std::cout << "  " << (lang.empty() ? "(untagged)" : lang) << ": " << fmt(100.0 * share, 1) << "%\n";
    }
  }
  for (const auto& e : result.entries) {
    if (e.error) print_error_line(g, e.id, *e.error);
  }
  return kExitOk;
}

// --- benchmark -------------------------------------------------------------

struct BenchmarkArgs {
  std::string dir;
  std::string human;
  std::string model;
  int base_level = 5;
};

int run_benchmark(const Globals& g, const BenchmarkArgs& a) {
  // CSV files hold precomputed per-utterance scores; subdirectories hold one
  // system's WAVs each and are scored here.
  if (!fs::is_directory(a.dir)) throw CliFailure{kExitInput, "not a directory: " + a.dir};
  auto systems = load_systems_dir(a.dir);
  std::vector<fs::path> audio_dirs;
  for (const auto& e : fs::directory_iterator(a.dir)) {
    if (e.is_directory()) audio_dirs.push_back(e.path());
  }
  std::sort(audio_dirs.begin(), audio_dirs.end());
  if (!audio_dirs.empty()) {
    const auto cfg = scoring_config(g);
    const auto model = resolve_model(a.model, cfg);
    ConfiguredProvider provider(cfg, resolve_calibration(cfg));
    for (const auto& d : audio_dirs) {
      systems.push_back(score_system_dir(d, d.filename().string(), provider, model, a.base_level,
                                         g.threads > 0 ? g.threads : cfg.threads));
    }
  }
  std::optional<std::map<std::string, double>> human;
  if (!a.human.empty()) human = load_human_scores(a.human);
  const auto report = benchmark(std::move(systems), human);

  if (g.json) {
    std::cout << to_json(report).dump() << "\n";
    return kExitOk;
  }
  std::cout << "system\ts_emo\ts_pros\ts_spon\ts_expr\trank";
  if (human) std::cout << "\thuman\thuman_rank";
  std::cout << "\n";
  for (const auto& s : report.systems) {
    std::cout << s.name << "\t" << fmt(s.mean_emo) << "\t" << fmt(s.mean_pros) << "\t" << fmt(s.mean_spon) << "\t"
              << fmt(s.mean_expr) << "\t" << numeric::format_shortest(s.rank);
    if (human) std::cout << "\t" << fmt(*s.human_score) << "\t" << numeric::format_shortest(*s.human_rank);
    std::cout << "\n";
  }
  if (report.srcc) std::cout << "SRCC " << fmt(*report.srcc, 4) << "\n";
  return kExitOk;
}

// --- train-fusion ----------------------------------------------------------

struct TrainArgs {
  std::string export_csv;
  std::string output;
  std::string log;
  FusionParams params;
};

int run_train(const Globals& g, const TrainArgs& a) {
  a.params.validate();
  const auto data = load_preference_csv(a.export_csv);
  const auto result = train_fusion(data, a.params);
  save_model(result.model, a.output);

  nlohmann::json log{{"model", a.output},
                     {"rows", data.rows.size()},
                     {"n_train", result.n_train},
                     {"n_validation", result.n_validation},
                     {"rounds_run", result.log.rounds_run},
                     {"best_round", result.log.best_round},
                     {"trees", result.model.trees.size()},
                     {"stop_reason", result.log.stop_reason},
                     {"degenerate_target", result.degenerate_target},
                     {"train_rmse", result.log.train_rmse},
                     {"validation_rmse", result.log.validation_rmse}};
  if (!a.log.empty()) {
    std::ofstream out(a.log);
    if (!out) throw CliFailure{kExitInput, "cannot write " + a.log};
    out << log.dump(2) << "\n";
  }
  if (g.json) {
    std::cout << log.dump() << "\n";
    return kExitOk;
  }
  std::cout << "rows " << data.rows.size() << " (train " << result.n_train << ", validation " << result.n_validation
            << ")\n";
  std::cout << "round\ttrain_rmse\tvalidation_rmse\n";
  for (std::size_t k = 0; k < result.log.train_rmse.size(); ++k) {
    std::cout << k << "\t" << fmt(result.log.train_rmse[k], 4) << "\t"
              << (k < result.log.validation_rmse.size() ? fmt(result.log.validation_rmse[k], 4) : std::string("-"))
              << "\n";
  }
  std::cout << "stopped: " << result.log.stop_reason << "; kept " << result.model.trees.size() << " trees\n"
            << "model written to " << a.output << "\n";
  return kExitOk;
}

// --- annotate-serve --------------------------------------------------------

struct ServeArgs {
  std::string roster;
  std::string manifest;
  bool selected_only = false;
  std::string ratings = "ratings.jsonl";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string ui_dir;
};

httplib::Server* g_server = nullptr;

int run_serve(const Globals&, const ServeArgs& a) {
  if (a.roster.empty() == a.manifest.empty()) throw CliFailure{kExitInput, "give exactly one of --roster or --manifest"};
  AnnotationService service(a.roster.empty() ? load_roster_manifest(a.manifest, a.selected_only) : load_roster_csv(a.roster),
                            a.ratings);
  httplib::Server server;
  service.install(server, a.ui_dir);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });

  int port = a.port;
  if (port == 0) port = server.bind_to_any_port(a.host);
  else if (!server.bind_to_port(a.host, port)) port = -1;
  if (port < 0) throw CliFailure{kExitInput, "cannot bind " + a.host + ":" + std::to_string(a.port)};
  std::cout << "serving " << service.roster().clips.size() << " clips on http://" << a.host << ":" << port
            << " (ratings in " << a.ratings << ")" << std::endl;
  server.listen_after_bind();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expressiveness scoring for speech corpora and speech-to-speech systems"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config (corpus roots, scorer backends, model and calibration paths)");
  app.add_flag("--json", g.json, "machine-readable output, one JSON document per line");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "score WAV files or directories");
  score->add_option("inputs", score_args.inputs, "WAV files or directories")->required();
  score->add_option("--model", score_args.model, "fusion model JSON");
  score->add_option("--quality", score_args.quality, "quality sidecar CSV (id,ovrl,sig,bak,p808)");
  score->add_option("--base-level", score_args.base_level, "spontaneity base level of the source (1,3,5,7,9)");

  std::vector<std::string> quality_inputs;
  auto* quality = app.add_subcommand("estimate-quality", "signal-based quality estimates as a sidecar CSV");
  quality->add_option("inputs", quality_inputs, "WAV files or directories")->required();

  CurateArgs curate_args;
  auto* curate_cmd = app.add_subcommand("curate", "score a corpus and write a filtered manifest");
  curate_cmd->add_option("--threshold", curate_args.threshold, "selection threshold on s_expr")->check(CLI::Range(0.0, 100.0));
  curate_cmd->add_option("--manifest", curate_args.manifest, "manifest output path");
  curate_cmd->add_option("--model", curate_args.model, "fusion model JSON");

  BenchmarkArgs bench_args;
  auto* bench = app.add_subcommand("benchmark", "rank systems and correlate with human scores");
  bench->add_option("dir", bench_args.dir, "directory of <system>.csv score files and/or <system>/ WAV folders")->required();
  bench->add_option("--human", bench_args.human, "human scores CSV (system,score)");
  bench->add_option("--model", bench_args.model, "fusion model JSON for WAV folders");
  bench->add_option("--base-level", bench_args.base_level, "spontaneity base level for WAV folders");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train-fusion", "fit the fusion model on an annotation export");
  train->add_option("export", train_args.export_csv, "CSV clip_id,s_emo,s_pros,s_spon,target")->required();
  train->add_option("-o,--output", train_args.output, "model output path")->required();
  train->add_option("--log", train_args.log, "write the training log as JSON");
  train->add_option("--rounds", train_args.params.rounds);
  train->add_option("--max-depth", train_args.params.max_depth);
  train->add_option("--shrinkage", train_args.params.shrinkage);
  train->add_option("--min-leaf", train_args.params.min_leaf);
  train->add_option("--validation-fraction", train_args.params.validation_fraction);
  train->add_option("--patience", train_args.params.patience);
  train->add_option("--seed", train_args.params.seed);

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("annotate-serve", "HTTP rating service for listening tests");
  serve->add_option("--roster", serve_args.roster, "roster CSV (id,audio[,s_emo,s_pros,s_spon])");
  serve->add_option("--manifest", serve_args.manifest, "build the roster from a curation manifest");
  serve->add_flag("--selected-only", serve_args.selected_only, "with --manifest, only selected entries");
  serve->add_option("--ratings", serve_args.ratings, "ratings log (JSONL)");
  serve->add_option("--host", serve_args.host, "bind address");
  serve->add_option("--port", serve_args.port, "port (0 picks a free one)");
  serve->add_option("--ui-dir", serve_args.ui_dir, "static files for the browser UI");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*score) return run_score(g, score_args);
    if (*quality) return run_estimate_quality(g, quality_inputs);
    if (*curate_cmd) return run_curate(g, curate_args);
    if (*bench) return run_benchmark(g, bench_args);
    if (*train) return run_train(g, train_args);
    if (*serve) return run_serve(g, serve_args);
  } catch (const CliFailure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitInput;
}
