// fobor command-line driver: fixture generation, training, evaluation,
// scoring, inspection dumps and gradient checking.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fobor/config.hpp"
#include "fobor/fobor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Raised while resolving arguments and configuration; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level log_level() {
  static const Level level = [] {
    const char* env = std::getenv("FOBOR_LOG");
    const std::string s = env ? env : "warn";
    if (s == "error") return Level::error;
    if (s == "info") return Level::info;
    if (s == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

void log_msg(Level level, const std::string& msg) {
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  if (level <= log_level()) std::cerr << "fobor [" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// Rounds to 9 significant digits so JSON output is diff-stable.
double sig9(double x) {
  if (!std::isfinite(x)) return x;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return std::strtod(buf, nullptr);
}

std::string fmt9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

json sig9_array(std::span<const double> v) {
  json a = json::array();
  for (double x : v) a.push_back(sig9(x));
  return a;
}

template <class Seq>
json index_array(const Seq& v) {
  json a = json::array();
  for (auto x : v) a.push_back(x);
  return a;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw fobor::Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw fobor::Error("failed writing " + path.string());
}

/// Writes to `path`, or to stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text << std::flush;
  } else {
    write_text(path, text);
    log_msg(Level::info, "wrote " + path);
  }
}

// ---------------------------------------------------------------------------
// Shared options and data access
// ---------------------------------------------------------------------------

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::uint32_t threads = 1;
  std::string out;
};

fobor::RunConfig resolve_config(const Globals& g) {
  fobor::RunConfig rc;
  try {
    if (!g.config_path.empty()) rc = fobor::load_run_config(g.config_path);
  } catch (const fobor::ConfigError& e) {
    throw UsageError(e.what());
  }
  if (g.seed) {
    rc.fixture.seed = *g.seed;
    rc.train.seed = *g.seed;
  }
  rc.train.threads = std::max<std::uint32_t>(1, g.threads);
  try {
    rc.fixture.check();
    rc.train.check();
  } catch (const fobor::InvalidArgument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  return rc;
}

std::string data_dir(const std::string& flag, const fobor::RunConfig& rc) {
  const std::string dir = flag.empty() ? rc.paths.data : flag;
  if (dir.empty()) throw UsageError("no data directory (use --data or paths.data)");
  if (!fs::is_directory(dir)) throw UsageError("data directory not found: " + dir);
  return dir;
}

struct DataDir {
  fs::path root;

  fs::path file(fobor::Split s) const { return root / (std::string(fobor::to_string(s)) + ".fobo"); }
  fobor::EmbeddingDataset load(fobor::Split s) const { return fobor::load_dataset(file(s)); }
  fobor::ClassTokens tokens() const { return fobor::load_class_tokens(root / "class_tokens.fobt"); }
};

void check_compatible(const fobor::EmbeddingDataset& ds, const fobor::ClassTokens& ct) {
  if (ds.dims.num_classes != ct.num_classes() || ds.dims.feature_dim != ct.dim())
    throw fobor::InvalidArgument("dataset dims do not match the class tokens");
}

fobor::Split parse_split(const std::string& s) {
  if (s == "id_train") return fobor::Split::id_train;
  if (s == "id_test") return fobor::Split::id_test;
  if (s == "ood_test") return fobor::Split::ood_test;
  throw UsageError("unknown split '" + s + "'");
}

/// The checkpoint when one is given, otherwise the seeded initial context.
fobor::PromptContext context_for(const std::string& checkpoint, const fobor::RunConfig& rc,
                                 std::size_t dim) {
  if (!checkpoint.empty()) {
    auto ctx = fobor::load_prompt(checkpoint);
    if (ctx.dim() != dim) throw fobor::InvalidArgument("checkpoint dim does not match the data");
    return ctx;
  }
  log_msg(Level::info, "no checkpoint given; using the initial context");
  return fobor::init_prompt(rc.train.context_length, dim, rc.train.init_sigma, rc.train.seed);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_fixture(const Globals& g) {
  const auto rc = resolve_config(g);
  if (g.out.empty()) throw UsageError("fixture requires --out <dir>");
  const fs::path dir = g.out;
  fs::create_directories(dir);
  const fobor::Fixture fx = fobor::generate_fixture(rc.fixture);

  json files = json::object();
  for (const auto* ds : {&fx.train, &fx.id_test, &fx.ood_test}) {
    const std::string name = std::string(fobor::to_string(ds->split)) + ".fobo";
    fobor::save_dataset(*ds, dir / name);
    files[name] = {{"records", ds->records.size()},
                   {"bytes", fobor::header_size_bytes(*ds) +
                                 ds->records.size() * fobor::record_size_bytes(ds->dims)}};
  }
  fobor::save_class_tokens(fx.class_tokens, dir / "class_tokens.fobt");
  files["class_tokens.fobt"] = {{"classes", fx.class_tokens.num_classes()}};

  const json manifest = {{"schema_version", fobor::kConfigSchemaVersion},
                         {"fixture", fobor::to_json(rc.fixture)},
                         {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  log_msg(Level::info, "fixture written to " + dir.string());
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string init;
  std::string history;
  std::optional<std::uint32_t> steps;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  auto rc = resolve_config(g);
  if (a.steps) rc.train.steps = *a.steps;
  const DataDir dd{data_dir(a.data, rc)};
  const std::string out = g.out.empty() ? rc.paths.checkpoint : g.out;
  if (out.empty()) throw UsageError("train requires --out <checkpoint> (or paths.checkpoint)");
  rc.paths.data = dd.root.string();
  rc.paths.checkpoint = out;
  std::cout << fobor::to_json(rc).dump(2) << '\n';

  const auto train_set = dd.load(fobor::Split::id_train);
  const auto ct = dd.tokens();
  check_compatible(train_set, ct);
  std::optional<fobor::PromptContext> init;
  if (!a.init.empty()) init = fobor::load_prompt(a.init);

  const auto result = fobor::train(train_set, ct, rc.train, std::move(init),
                                   [](std::uint32_t step, const fobor::LossBreakdown& l) {
                                     if (log_level() >= Level::debug)
                                       log_msg(Level::debug, "step " + std::to_string(step) +
                                                             " l_total " + fmt9(l.l_total));
                                   });
  fobor::save_prompt(result.context, out);

  std::string csv = "step,l_id,l_abs,l_cfr,l_total\n";
  for (std::size_t s = 0; s < result.history.size(); ++s) {
    const auto& l = result.history[s];
    csv += std::to_string(s) + ',' + fmt9(l.l_id) + ',' + fmt9(l.l_abs) + ',' + fmt9(l.l_cfr) +
           ',' + fmt9(l.l_total) + '\n';
  }
  write_text(a.history.empty() ? out + ".history.csv" : a.history, csv);
  log_msg(Level::info, "checkpoint written to " + out);
  return kExitOk;
}

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::vector<std::string> ood;
  std::string csv;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const auto rc = resolve_config(g);
  const DataDir dd{data_dir(a.data, rc)};
  const auto ct = dd.tokens();
  const auto id_test = dd.load(fobor::Split::id_test);
  check_compatible(id_test, ct);

  std::vector<std::pair<std::string, fobor::EmbeddingDataset>> ood_data;
  if (a.ood.empty()) {
    ood_data.emplace_back("ood_test", dd.load(fobor::Split::ood_test));
  } else {
    for (const auto& p : a.ood) ood_data.emplace_back(fs::path(p).stem().string(), fobor::load_dataset(p));
  }
  std::vector<fobor::OodSet> sets;
  for (const auto& [name, ds] : ood_data) {
    check_compatible(ds, ct);
    sets.push_back({name, &ds});
  }

  const auto ctx = fobor::load_prompt(a.checkpoint);
  const auto reports = fobor::evaluate(ctx, ct, id_test, sets, rc.train.tau, rc.train.threads);

  auto hist_json = [](const fobor::Histogram& h) {
    return json{{"lo", sig9(h.lo)}, {"hi", sig9(h.hi)}, {"counts", h.counts}};
  };
  json jr = json::array();
  std::string csv = "score_fn,ood_set,auroc,fpr95,n_id,n_ood\n";
  for (const auto& r : reports) {
    json per = json::object();
    for (const auto& [name, m] : r.per_ood_set) {
      per[name] = {{"auroc", sig9(m.auroc)},
                   {"fpr95", sig9(m.fpr95)},
                   {"n_id", m.n_id},
                   {"n_ood", m.n_ood},
                   {"histogram", hist_json(r.ood_histograms.at(name))}};
      csv += std::string(fobor::to_string(r.score_fn)) + ',' + name + ',' + fmt9(m.auroc) + ',' +
             fmt9(m.fpr95) + ',' + std::to_string(m.n_id) + ',' + std::to_string(m.n_ood) + '\n';
    }
    jr.push_back({{"score_fn", fobor::to_string(r.score_fn)},
                  {"per_ood_set", per},
                  {"average_auroc", sig9(r.average_auroc)},
                  {"average_fpr95", sig9(r.average_fpr95)},
                  {"id_histogram", hist_json(r.id_histogram)}});
  }
  emit(g.out, json{{"tau", sig9(rc.train.tau)}, {"reports", jr}}.dump(2) + "\n");
  if (!a.csv.empty()) write_text(a.csv, csv);
  return kExitOk;
}

struct InspectArgs {
  std::string data;
  std::string checkpoint;
  std::string split;
};

int cmd_score(const Globals& g, const InspectArgs& a) {
  const auto rc = resolve_config(g);
  const DataDir dd{data_dir(a.data, rc)};
  const auto ct = dd.tokens();
  const auto ds = dd.load(parse_split(a.split.empty() ? "id_test" : a.split));
  check_compatible(ds, ct);
  const auto bank = fobor::encode_classes(context_for(a.checkpoint, rc, ct.dim()), ct);
  const auto scores = fobor::score_dataset(ds, bank, rc.train.tau, rc.train.threads);

  std::string lines;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& label = ds.records[i].label;
    lines += json{{"record_index", i},
                  {"mcm", sig9(scores[i].mcm)},
                  {"lmcm", sig9(scores[i].lmcm)},
                  {"glmcm", sig9(scores[i].glmcm)},
                  {"label", label ? json(*label) : json(nullptr)}}
                 .dump() +
             '\n';
  }
  emit(g.out, lines);
  return kExitOk;
}

int cmd_decompose(const Globals& g, const InspectArgs& a) {
  const auto rc = resolve_config(g);
  const DataDir dd{data_dir(a.data, rc)};
  const auto ct = dd.tokens();
  const auto ds = dd.load(parse_split(a.split.empty() ? "id_train" : a.split));
  check_compatible(ds, ct);
  if (!ds.has_labels()) throw UsageError("decompose needs a labelled split");
  const auto bank = fobor::encode_classes(context_for(a.checkpoint, rc, ct.dim()), ct);

  std::vector<std::string> lines(ds.records.size());
  fobor::parallel_for(ds.records.size(), rc.train.threads, [&](std::size_t i) {
    const auto& rec = ds.records[i];
    const auto pm = fobor::posteriors(rec, bank, rc.train.tau);
    const auto plan = fobor::plan_image(rec, bank, pm, rc.train);
    const auto& dec = plan.decomposition;
    json rec_json = {{"index", i},
                     {"label", plan.label},
                     {"kappa", dec.kappa},
                     {"fg", index_array(dec.fg)},
                     {"bg", index_array(dec.bg)},
                     {"ranks", index_array(dec.ranks)}};
    if (!dec.bg.empty()) {
      const auto cw = fobor::correlation_weights(rec, dec.bg, pm.global_probs[plan.label], rc.train.eta);
      rec_json["abs"] = {{"p_true", sig9(cw.p_true)}, {"r", sig9_array(cw.r)}, {"w", sig9_array(cw.w)}};
    }
    if (plan.has_cfr())
      rec_json["cfr"] = {{"classes", index_array(plan.classes)}, {"patches", index_array(plan.patches)}};
    lines[i] = rec_json.dump() + '\n';
  });
  std::string text;
  for (const auto& l : lines) text += l;
  emit(g.out, text);
  return kExitOk;
}

struct GradcheckArgs {
  std::string data;
  std::string checkpoint;
  double eps = 1e-5;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  const auto rc = resolve_config(g);
  fobor::EmbeddingDataset train_set;
  fobor::ClassTokens ct;
  const std::string dir = a.data.empty() ? rc.paths.data : a.data;
  if (dir.empty()) {
    log_msg(Level::info, "no data directory; generating the configured fixture");
    auto fx = fobor::generate_fixture(rc.fixture);
    train_set = std::move(fx.train);
    ct = std::move(fx.class_tokens);
  } else {
    const DataDir dd{data_dir(dir, rc)};
    train_set = dd.load(fobor::Split::id_train);
    ct = dd.tokens();
  }
  check_compatible(train_set, ct);
  const std::size_t n = std::min<std::size_t>(rc.train.batch_size, train_set.records.size());
  const auto batch =
      fobor::make_batch(std::span<const fobor::EmbeddingRecord>(train_set.records.data(), n));
  const auto ctx = context_for(a.checkpoint, rc, ct.dim());

  fobor::FdOptions opt;
  opt.eps = a.eps;
  opt.seed = rc.train.seed;
  const double err = fobor::fd_check(batch, ctx, ct, rc.train, opt);
  const bool ok = err < a.tolerance;
  emit(g.out, json{{"max_relative_error", sig9(err)},
                   {"tolerance", sig9(a.tolerance)},
                   {"batch_size", n},
                   {"pass", ok}}
                      .dump(2) +
                  "\n");
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fobor: foreground-background prompt regularization toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides fixture.seed and train.seed");
  app.add_option("--threads", g.threads, "worker thread cap")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output path (file or directory)");

  auto* fixture = app.add_subcommand("fixture", "generate a synthetic fixture directory");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "learn the prompt context on id_train");
  train->add_option("--data", ta.data, "fixture directory");
  train->add_option("--init", ta.init, "initial context checkpoint")->check(CLI::ExistingFile);
  train->add_option("--history", ta.history, "history CSV (default <out>.history.csv)");
  train->add_option("--steps", ta.steps, "overrides train.steps");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "AUROC and FPR95 for MCM and GL-MCM");
  eval->add_option("--data", ea.data, "fixture directory");
  eval->add_option("--checkpoint", ea.checkpoint, "context checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--ood", ea.ood, "additional OOD .fobo files (default ood_test)")->check(CLI::ExistingFile);
  eval->add_option("--csv", ea.csv, "also write one CSV row per OOD set");

  InspectArgs sa;
  auto* score = app.add_subcommand("score", "per-record MCM, L-MCM and GL-MCM as JSON lines");
  score->add_option("--data", sa.data, "fixture directory");
  score->add_option("--checkpoint", sa.checkpoint, "context checkpoint")->check(CLI::ExistingFile);
  score->add_option("--split", sa.split, "id_train, id_test or ood_test (default id_test)");

  InspectArgs da;
  auto* decompose = app.add_subcommand("decompose", "per-image fg/bg split, ABS weights and CFR selections");
  decompose->add_option("--data", da.data, "fixture directory");
  decompose->add_option("--checkpoint", da.checkpoint, "context checkpoint")->check(CLI::ExistingFile);
  decompose->add_option("--split", da.split, "id_train or id_test (default id_train)");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "compare the analytic gradient with central differences");
  gradcheck->add_option("--data", ga.data, "fixture directory (default: generate from config)");
  gradcheck->add_option("--checkpoint", ga.checkpoint, "context checkpoint")->check(CLI::ExistingFile);
  gradcheck->add_option("--eps", ga.eps, "finite-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", ga.tolerance, "pass threshold on the relative error");

  for (auto* sub : {fixture, train, eval, score, decompose, gradcheck}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*fixture) return cmd_fixture(g);
    if (*train) return cmd_train(g, ta);
    if (*eval) return cmd_eval(g, ea);
    if (*score) return cmd_score(g, sa);
    if (*decompose) return cmd_decompose(g, da);
    if (*gradcheck) return cmd_gradcheck(g, ga);
  } catch (const UsageError& e) {
    log_msg(Level::error, e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    log_msg(Level::error, e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
