// Tests for the command-line pipeline: config loading and validation, the
// run-config hash, binary artifact round-trips, split/graph agreement, exit
// codes, stage chaining, determinism across reruns and thread counts, and
// the external-scores evaluation path.
#include <doctest.h>

#include <array>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "relrisk/cli.hpp"
#include "relrisk/common.hpp"
#include "relrisk/features.hpp"
#include "relrisk/graph.hpp"
#include "relrisk/ingest.hpp"
#include "relrisk/metrics.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace relrisk;

namespace {

struct RunResult {
  int rc = -1;
  std::string out;
  std::string err;
};

// Runs the CLI in-process while capturing stdout/stderr, so tests can check
// both exit codes and the messages the contract promises.
RunResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
  RunResult r;
  try {
    r.rc = run_cli(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// A configuration small enough that every stage finishes in seconds.
json tiny_config(std::uint64_t seed) {
  json j;
  j["seed"] = seed;
  j["data"]["synthetic"] = {{"n_customers", 250}, {"base_rate", 0.2}, {"beta", 1.0}};
  j["features"] = {{"target_encode", json::array({"CODE_GENDER"})}};
  j["gnn"] = {{"hidden_dim", 8}, {"heads", 2},          {"epochs", 2},
              {"batch_size", 64}, {"fanout", {3, 3}},   {"patience", 2},
              {"eval_batch_size", 256}};
  j["pretrain"] = {{"epochs", 1},      {"batch_size", 64}, {"fanout", {3, 3}},
                   {"proj_hidden", 8}, {"proj_out", 4}};
  j["gbdt"] = {{"max_iterations", 30},
               {"num_leaves", 5},
               {"min_data_in_leaf", 8},
               {"early_stopping_rounds", 10}};
  j["logistic"] = {{"max_iterations", 300}};
  j["calibrate"] = true;
  j["calibration_folds"] = 3;
  return j;
}

std::string write_config(testutil::TempDir& tmp, const std::string& name, const json& j) {
  const std::string path = tmp.file(name);
  testutil::write_text(path, j.dump(2));
  return path;
}

std::string slurp(const std::string& path) { return testutil::read_text(path); }

}  // namespace

TEST_CASE("run config: defaults survive a load round-trip and overrides apply") {
  testutil::TempDir tmp;

  const RunConfig defaults = default_run_config();
  const std::string def_path = write_config(tmp, "def.json", json::parse(run_config_json(defaults)));
  const RunConfig reloaded = load_run_config(def_path);
  CHECK(run_config_hash(reloaded) == run_config_hash(defaults));
  CHECK(reloaded.seed == defaults.seed);
  CHECK(reloaded.gnn.net.hidden_dim == defaults.gnn.net.hidden_dim);
  CHECK(reloaded.metrics.group_columns == defaults.metrics.group_columns);

  json j;
  j["seed"] = 9;
  j["gnn"] = {{"arch", "relattn"}, {"layers", 2}, {"fanout", {5, 5}}, {"lr", 0.01}};
  j["data"] = {{"source", "synthetic"}, {"synthetic", {{"n_customers", 123}}}};
  j["metrics"] = {{"tau", 0.3}, {"age_bin_edges", {25.0, 40.0, 60.0}}};
  const RunConfig cfg = load_run_config(write_config(tmp, "cfg.json", j));
  CHECK(cfg.seed == 9);
  CHECK(cfg.gnn.net.arch == GnnArch::relattn);
  CHECK(cfg.gnn.train.fanout.per_hop == std::vector<int>{5, 5});
  CHECK(cfg.gnn.train.lr == doctest::Approx(0.01));
  CHECK(cfg.data.synthetic.n_customers == 123);
  CHECK(cfg.metrics.tau == doctest::Approx(0.3));
  CHECK(cfg.metrics.age_bin_edges == std::vector<double>{25.0, 40.0, 60.0});
}

TEST_CASE("run config: malformed files and bad values are rejected") {
  testutil::TempDir tmp;

  CHECK_THROWS_AS(load_run_config(tmp.file("absent.json")), ConfigError);

  const std::string bad_json = tmp.file("bad.json");
  testutil::write_text(bad_json, "{\"seed\": ");
  CHECK_THROWS_AS(load_run_config(bad_json), ConfigError);

  const std::string not_object = tmp.file("arr.json");
  testutil::write_text(not_object, "[1, 2]");
  CHECK_THROWS_AS(load_run_config(not_object), ConfigError);

  // Unknown keys are rejected rather than silently ignored, and the message
  // names the offending path.
  const std::string unknown = tmp.file("unknown.json");
  testutil::write_text(unknown, "{\"gnn\": {\"hiden_dim\": 8}}");
  try {
    load_run_config(unknown);
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("gnn.hiden_dim") != std::string::npos);
  }

  auto rejects = [&](const json& j) {
    const std::string p = write_config(tmp, "reject.json", j);
    CHECK_THROWS_AS(load_run_config(p), ConfigError);
  };
  rejects(json{{"metrics", {{"tau", 1.5}}}});
  rejects(json{{"metrics", {{"k_fractions", {0.0}}}}});
  rejects(json{{"metrics", {{"age_bin_edges", {40.0, 25.0}}}}});
  rejects(json{{"gnn", {{"layers", 2}, {"fanout", {3, 3, 3}}}}});
  rejects(json{{"gnn", {{"fanout", {0, 3}}}}});
  rejects(json{{"data", {{"source", "postgres"}}}});
  rejects(json{{"data", {{"source", "directory"}}}});  // directory path missing
  rejects(json{{"split", {{"val_fraction", 0.6}, {"test_fraction", 0.6}}}});
  rejects(json{{"calibrate", true}, {"calibration_folds", 1}});
  rejects(json{{"features", {{"drop_missing_above", 1.5}}}});
}

TEST_CASE("run config hash: stable across reloads, blind to out/threads, sensitive to the rest") {
  testutil::TempDir tmp;
  RunConfig a = default_run_config();
  const std::string base = run_config_hash(a);

  RunConfig b = load_run_config(write_config(tmp, "a.json", json::parse(run_config_json(a))));
  CHECK(run_config_hash(b) == base);

  a.out = "elsewhere";
  a.threads = 7;
  CHECK(run_config_hash(a) == base);

  a.seed = 43;
  const std::string seeded = run_config_hash(a);
  CHECK(seeded != base);
  a.seed = 42;
  a.gbdt.learning_rate += 0.01;
  CHECK(run_config_hash(a) != base);
  CHECK(run_config_hash(a) != seeded);
}

TEST_CASE("feature matrix artifact: bitwise round-trip and corruption detection") {
  testutil::TempDir tmp;

  FeatureMatrix fm;
  fm.row_ids = {11, 7, 5};
  FeatureColumn num;
  num.name = "AMT";
  num.lineage = Lineage::raw;
  fm.add_column(num, {1.5, std::numeric_limits<double>::quiet_NaN(), -0.0});
  FeatureColumn cat;
  cat.name = "GENDER";
  cat.lineage = Lineage::target_encoded;
  cat.categorical = true;
  cat.dict = {"F", "M"};
  fm.add_column(cat, {0.0, 1.0, 0.0});

  const std::string path = tmp.file("fm.bin");
  save_feature_matrix(path, fm);
  const FeatureMatrix back = load_feature_matrix(path);

  REQUIRE(back.n_rows() == fm.n_rows());
  CHECK(back.row_ids == fm.row_ids);
  REQUIRE(back.columns.size() == fm.columns.size());
  for (std::size_t c = 0; c < fm.columns.size(); ++c) {
    const FeatureColumn& want = fm.columns[c];
    const FeatureColumn& got = back.columns[c];
    CHECK(got.name == want.name);
    CHECK(got.lineage == want.lineage);
    CHECK(got.categorical == want.categorical);
    CHECK(got.dict == want.dict);
  }
  REQUIRE(back.values.size() == fm.values.size());
  // Bitwise comparison: NaN payloads and signed zeros must survive.
  CHECK(std::memcmp(back.values.data(), fm.values.data(),
                    fm.values.size() * sizeof(double)) == 0);

  const std::string whole = slurp(path);
  const std::string trunc = tmp.file("trunc.bin");
  testutil::write_text(trunc, whole.substr(0, whole.size() / 2));
  CHECK_THROWS_AS(load_feature_matrix(trunc), DataError);

  const std::string wrong = tmp.file("wrong.bin");
  std::string mangled = whole;
  mangled[0] ^= 0x5a;
  testutil::write_text(wrong, mangled);
  CHECK_THROWS_AS(load_feature_matrix(wrong), DataError);

  CHECK_THROWS_AS(load_feature_matrix(tmp.file("missing.bin")), DataError);
}

TEST_CASE("embeddings artifact: round-trip and truncation error") {
  testutil::TempDir tmp;

  StoredEmbeddings se;
  se.source = "relattn";
  se.row_ids = {4, 2, 9};
  se.emb.n_rows = 3;
  se.emb.dim = 2;
  se.emb.values = {0.5f, -1.25f, 3.0f, 0.0f, -7.5f, 2.25f};

  const std::string path = tmp.file("emb.bin");
  save_embeddings(path, se);
  const StoredEmbeddings back = load_embeddings(path);
  CHECK(back.source == se.source);
  CHECK(back.row_ids == se.row_ids);
  CHECK(back.emb.n_rows == se.emb.n_rows);
  CHECK(back.emb.dim == se.emb.dim);
  REQUIRE(back.emb.values.size() == se.emb.values.size());
  CHECK(std::memcmp(back.emb.values.data(), se.emb.values.data(),
                    se.emb.values.size() * sizeof(float)) == 0);

  const std::string whole = slurp(path);
  const std::string trunc = tmp.file("trunc.bin");
  testutil::write_text(trunc, whole.substr(0, whole.size() - 3));
  CHECK_THROWS_AS(load_embeddings(trunc), DataError);
}

TEST_CASE("splits: csv round-trip, stratification, and agreement with graph masks") {
  const std::uint64_t seed = 5;
  SynthConfig sc;
  sc.n_customers = 300;
  sc.base_rate = 0.2;
  const RelationalDataset ds = generate_synthetic(sc, seed);
  const std::vector<int64_t> ids = ds.customer_ids();
  const std::vector<int> labels = ds.labels();

  SplitConfig split;
  const SplitTable table = make_splits(ids, labels, split, seed);
  REQUIRE(table.row_ids.size() == ids.size());

  // Stratified: positive rate in each split stays close to the global rate.
  std::array<int, 3> n{}, pos{};
  for (std::size_t i = 0; i < table.row_ids.size(); ++i) {
    n[table.split_of[i]]++;
    pos[table.split_of[i]] += table.labels[i];
  }
  const double rate = static_cast<double>(pos[0] + pos[1] + pos[2]) / ids.size();
  for (int s = 0; s < 3; ++s) {
    CHECK(n[s] > 0);
    CHECK(static_cast<double>(pos[s]) / n[s] == doctest::Approx(rate).epsilon(0.25));
  }
  CHECK(n[1] == doctest::Approx(0.15 * ids.size()).epsilon(0.02));
  CHECK(n[2] == doctest::Approx(0.15 * ids.size()).epsilon(0.02));

  testutil::TempDir tmp;
  const std::string csv = tmp.file("splits.csv");
  write_splits_csv(csv, table);
  const SplitTable back = read_splits_csv(csv);
  CHECK(back.row_ids == table.row_ids);
  CHECK(back.labels == table.labels);
  CHECK(back.split_of == table.split_of);

  const std::string broken = tmp.file("broken.csv");
  testutil::write_text(broken, "row_id,label,split\n1,0,nowhere\n");
  CHECK_THROWS_AS(read_splits_csv(broken), DataError);

  // The tabular split table and the graph's masks must agree per customer id:
  // both are derived from the same stratified assignment and seed.
  GraphConfig gc;
  gc.split_seed = seed;
  gc.val_fraction = split.val_fraction;
  gc.test_fraction = split.test_fraction;
  const HeteroGraph g = build_hetero_graph(ds, gc);

  std::unordered_map<int64_t, int> split_by_id;
  for (std::size_t i = 0; i < table.row_ids.size(); ++i)
    split_by_id[table.row_ids[i]] = table.split_of[i];
  const NodeSet& customers = g.nodes[static_cast<int>(NodeType::customer)];
  REQUIRE(customers.global_ids.size() == ids.size());
  for (std::size_t r = 0; r < customers.global_ids.size(); ++r) {
    const int want = split_by_id.at(customers.global_ids[r]);
    const int got = g.val_mask[r] ? 1 : (g.test_mask[r] ? 2 : 0);
    CHECK(g.train_mask[r] + g.val_mask[r] + g.test_mask[r] == 1);
    CHECK(got == want);
  }
}

TEST_CASE("cli: exit codes and 'run X first' guidance follow the contract") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(3));
  const std::string out = tmp.file("out");

  CHECK(run({"definitely-not-a-command"}).rc == 1);
  CHECK(run({"--help"}).rc == 0);
  CHECK(run({}).rc == 1);  // a subcommand is required
  CHECK(run({"eda", "--config", tmp.file("absent.json")}).rc == 1);

  const std::string bad = tmp.file("bad.json");
  testutil::write_text(bad, "{\"metrics\": {\"tau\": 2.0}}");
  CHECK(run({"eda", "--config", bad}).rc == 1);

  // Stages that need upstream artifacts must fail with exit 2 and name the
  // stage to run.
  const RunResult tab = run({"train-tabular", "--config", cfg, "--out", out});
  CHECK(tab.rc == 2);
  CHECK(tab.err.find("run 'relrisk features' first") != std::string::npos);

  const RunResult gnn = run({"train-gnn", "--config", cfg, "--out", out});
  CHECK(gnn.rc == 2);
  CHECK(gnn.err.find("run 'relrisk build-graph' first") != std::string::npos);

  CHECK(run({"extract-embeddings", "--config", cfg, "--out", out}).rc == 2);

  const RunResult ev = run({"evaluate", "--config", cfg, "--out", out});
  CHECK(ev.rc == 2);
  CHECK(ev.err.find("first") != std::string::npos);

  CHECK(run({"evaluate", "--config", cfg, "--out", out, "--scores",
             tmp.file("no_scores.csv")}).rc == 2);

  // A data directory that does not exist is a data error, not a usage error.
  json dir_cfg = tiny_config(3);
  dir_cfg["data"] = {{"source", "directory"}, {"directory", tmp.file("no_such_dir")}};
  const std::string dcfg = write_config(tmp, "dir.json", dir_cfg);
  CHECK(run({"eda", "--config", dcfg, "--out", out}).rc == 2);
}

TEST_CASE("features stage: artifacts, manifest, and determinism across reruns and threads") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(11));
  const std::string a = tmp.file("a");
  const std::string b = tmp.file("b");
  const std::string c = tmp.file("c");

  REQUIRE(run({"features", "--config", cfg, "--out", a}).rc == 0);
  REQUIRE(run({"features", "--config", cfg, "--out", b}).rc == 0);
  const int saved_threads = thread_count();
  REQUIRE(run({"features", "--config", cfg, "--out", c, "--threads", "4"}).rc == 0);
  set_thread_count(saved_threads);

  for (const char* name :
       {"features/features_raw.bin", "features/features_scaled.bin",
        "features/splits.csv", "features/preprocess.json"}) {
    const std::string fa = a + "/" + name;
    REQUIRE(fs::exists(fa));
    const std::string bytes = slurp(fa);
    CHECK(bytes == slurp(b + "/" + name));
    CHECK(bytes == slurp(c + "/" + name));
  }

  const json manifest = json::parse(slurp(a + "/manifests/features.json"));
  CHECK(manifest.at("stage") == "features");
  CHECK(manifest.at("seed") == 11);
  CHECK(manifest.at("config_hash").get<std::string>().size() == 16);
  CHECK(manifest.at("version").get<std::string>().rfind("v0.1", 0) == 0);
  CHECK(manifest.at("wall_time_seconds").get<double>() >= 0.0);

  const FeatureMatrix raw = load_feature_matrix(a + "/features/features_raw.bin");
  CHECK(raw.n_rows() == 250);
  CHECK(raw.columns.size() > 10);
  bool has_te = false;
  for (const FeatureColumn& col : raw.columns)
    if (col.lineage == Lineage::target_encoded) has_te = true;
  CHECK(has_te);
}

TEST_CASE("tabular stage: models, scores, calibration, and byte-identical reruns") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(13));
  const std::string a = tmp.file("a");
  const std::string b = tmp.file("b");

  for (const std::string& out : {a, b}) {
    REQUIRE(run({"features", "--config", cfg, "--out", out}).rc == 0);
    REQUIRE(run({"train-tabular", "--config", cfg, "--out", out}).rc == 0);
  }

  for (const char* name :
       {"models/gbdt.json", "models/logistic.json", "models/isotonic.json",
        "scores/gbdt_val.csv", "scores/gbdt_test.csv", "scores/gbdt_cal_test.csv",
        "scores/logistic_val.csv", "scores/logistic_test.csv"}) {
    REQUIRE(fs::exists(a + "/" + name));
    CHECK(slurp(a + "/" + name) == slurp(b + "/" + name));
  }

  const SplitTable splits = read_splits_csv(a + "/features/splits.csv");
  const ScoreReport r = read_scores_csv(a + "/scores/gbdt_test.csv");
  CHECK(r.scores.size() == splits.rows_of(2).size());
  for (double s : r.scores) {
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }

  // evaluate + report off the freshly written scores
  REQUIRE(run({"evaluate", "--config", cfg, "--out", a}).rc == 0);
  const std::string metrics = slurp(a + "/metrics/metrics.csv");
  CHECK(metrics.find("gbdt,test,") != std::string::npos);
  CHECK(metrics.find("logistic,val,") != std::string::npos);
  CHECK(metrics.find("gbdt_cal,test,") != std::string::npos);

  const RunResult rep = run({"report", "--config", cfg, "--out", a});
  REQUIRE(rep.rc == 0);
  const std::string md = slurp(a + "/report/model_comparison.md");
  CHECK(md.find("Logistic Regression") != std::string::npos);
  CHECK(md.find("GBDT") != std::string::npos);
  CHECK(md.find("baseline") != std::string::npos);
}

TEST_CASE("graph and gnn stages: end-to-end miniature run with pretraining and hybrid") {
  testutil::TempDir tmp;
  json base = tiny_config(17);
  base["embeddings"] = {{"source", "sage"}};
  const std::string cfg = write_config(tmp, "cfg.json", base);
  const std::string out = tmp.file("out");

  REQUIRE(run({"features", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(run({"build-graph", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(fs::exists(out + "/graph/manifest.json"));
  REQUIRE(fs::exists(out + "/graph/graph_report.json"));

  // Scratch training of the default arch (sage in this config).
  const RunResult t1 = run({"train-gnn", "--config", cfg, "--out", out});
  REQUIRE(t1.rc == 0);
  REQUIRE(fs::exists(out + "/models/gnn_sage.bin"));
  REQUIRE(fs::exists(out + "/models/gnn_sage_history.csv"));
  REQUIRE(fs::exists(out + "/scores/sage_test.csv"));

  REQUIRE(run({"pretrain", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(fs::exists(out + "/models/gnn_pretrained.bin"));
  const std::string loss_csv = slurp(out + "/models/pretrain_loss.csv");
  CHECK(loss_csv.rfind("epoch,loss", 0) == 0);

  json ft = base;
  ft["gnn"]["init_from_pretrained"] = true;
  const std::string ft_cfg = write_config(tmp, "ft.json", ft);
  REQUIRE(run({"train-gnn", "--config", ft_cfg, "--out", out}).rc == 0);
  REQUIRE(fs::exists(out + "/models/gnn_pretrain_ft.bin"));
  REQUIRE(fs::exists(out + "/scores/pretrain_ft_test.csv"));

  REQUIRE(run({"extract-embeddings", "--config", cfg, "--out", out}).rc == 0);
  const StoredEmbeddings se = load_embeddings(out + "/embeddings/embeddings.bin");
  CHECK(se.source == "sage");
  CHECK(se.emb.dim == 8);
  CHECK(se.emb.n_rows == 250);
  CHECK(se.row_ids.size() == 250);

  REQUIRE(run({"train-tabular", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(run({"train-hybrid", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(fs::exists(out + "/models/gbdt_hybrid.json"));
  REQUIRE(fs::exists(out + "/scores/hybrid_test.csv"));

  REQUIRE(run({"evaluate", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(run({"fairness-audit", "--config", cfg, "--out", out}).rc == 0);
  const RunResult rep = run({"report", "--config", cfg, "--out", out});
  REQUIRE(rep.rc == 0);
  const std::string md = slurp(out + "/report/model_comparison.md");
  for (const char* row : {"Logistic Regression", "GBDT", "GraphSAGE",
                          "Contrastive + Fine-tune", "Hybrid (GBDT + GNN)"})
    CHECK(md.find(row) != std::string::npos);

  // No config-hash warnings were expected anywhere above except for the
  // fine-tune stage, whose config legitimately differs from the others'.
  CHECK(t1.err.find("config hash mismatch") == std::string::npos);
}

TEST_CASE("gnn training is reproducible byte-for-byte across separate runs") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(19));
  const std::string a = tmp.file("a");
  const std::string b = tmp.file("b");

  for (const std::string& out : {a, b}) {
    REQUIRE(run({"build-graph", "--config", cfg, "--out", out}).rc == 0);
    REQUIRE(run({"train-gnn", "--config", cfg, "--out", out}).rc == 0);
  }
  for (const char* name : {"models/gnn_sage.bin", "models/gnn_sage_history.csv",
                           "scores/sage_test.csv", "scores/sage_val.csv"})
    CHECK(slurp(a + "/" + name) == slurp(b + "/" + name));
}

TEST_CASE("evaluate: external score file is scored standalone with exact metrics") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(23));
  const std::string out = tmp.file("out");

  // Hand-checked fixture: positives score {0.9, 0.2}, negatives {0.8, 0.1};
  // of the four positive/negative pairs three are ordered correctly, so
  // ROC-AUC = 0.75.
  const std::string scores = tmp.file("external.csv");
  testutil::write_text(scores,
                       "row_id,score,label\n"
                       "1,0.9,1\n"
                       "2,0.8,0\n"
                       "3,0.2,1\n"
                       "4,0.1,0\n");
  const RunResult r = run({"evaluate", "--config", cfg, "--out", out, "--scores", scores});
  REQUIRE(r.rc == 0);

  const json metrics = json::parse(slurp(out + "/metrics/external_metrics.json"));
  REQUIRE(metrics.is_array());
  REQUIRE(metrics.size() == 1);
  CHECK(metrics[0].at("model") == "external");
  CHECK(metrics[0].at("n") == 4);
  CHECK(metrics[0].at("roc_auc").get<double>() == doctest::Approx(0.75).epsilon(1e-12));
  const std::string csv = slurp(out + "/metrics/external_metrics.csv");
  CHECK(csv.find("external,external,4,0.75,") != std::string::npos);
}

TEST_CASE("chained stages warn when the upstream config hash differs") {
  testutil::TempDir tmp;
  const std::string cfg1 = write_config(tmp, "c1.json", tiny_config(29));
  const std::string cfg2 = write_config(tmp, "c2.json", tiny_config(31));
  const std::string out = tmp.file("out");

  REQUIRE(run({"features", "--config", cfg1, "--out", out}).rc == 0);
  const RunResult r = run({"train-tabular", "--config", cfg2, "--out", out});
  REQUIRE(r.rc == 0);
  CHECK(r.err.find("config hash mismatch") != std::string::npos);
  CHECK(r.err.find("features") != std::string::npos);

  // Same config again: no warning.
  const RunResult clean = run({"train-tabular", "--config", cfg1, "--out", out});
  REQUIRE(clean.rc == 0);
  CHECK(clean.err.find("config hash mismatch") == std::string::npos);
}

TEST_CASE("environment variables override output dir and threads, flags beat both") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(37));
  const std::string env_out = tmp.file("env_out");
  const std::string flag_out = tmp.file("flag_out");
  const int saved_threads = thread_count();

  ::setenv("RELRISK_OUT", env_out.c_str(), 1);
  REQUIRE(run({"eda", "--config", cfg}).rc == 0);
  CHECK(fs::exists(env_out + "/eda/eda.json"));

  REQUIRE(run({"eda", "--config", cfg, "--out", flag_out}).rc == 0);
  CHECK(fs::exists(flag_out + "/eda/eda.json"));
  ::unsetenv("RELRISK_OUT");

  ::setenv("RELRISK_THREADS", "2", 1);
  REQUIRE(run({"features", "--config", cfg, "--out", flag_out}).rc == 0);
  const json manifest = json::parse(slurp(flag_out + "/manifests/features.json"));
  CHECK(manifest.at("threads") == 2);
  ::setenv("RELRISK_THREADS", "not-a-number", 1);
  CHECK(run({"eda", "--config", cfg, "--out", flag_out}).rc == 1);
  ::unsetenv("RELRISK_THREADS");
  set_thread_count(saved_threads);
}

TEST_CASE("fairness audit: derived age bands and categorical groups") {
  testutil::TempDir tmp;
  json j = tiny_config(41);
  j["metrics"] = {{"group_columns", json::array({"AGE_BAND", "CODE_GENDER"})},
                  {"age_bin_edges", json::array({30.0, 50.0})}};
  const std::string cfg = write_config(tmp, "cfg.json", j);
  const std::string out = tmp.file("out");

  REQUIRE(run({"features", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(run({"train-tabular", "--config", cfg, "--out", out}).rc == 0);
  const RunResult r = run({"fairness-audit", "--config", cfg, "--out", out});
  REQUIRE(r.rc == 0);

  const std::string sub = slurp(out + "/fairness/subgroups.csv");
  CHECK(sub.find("AGE_BAND=lt30") != std::string::npos);
  CHECK(sub.find("AGE_BAND=30-50") != std::string::npos);
  CHECK(sub.find("AGE_BAND=ge50") != std::string::npos);
  CHECK(sub.find("CODE_GENDER=") != std::string::npos);
  CHECK(fs::exists(out + "/fairness/thresholds.csv"));
  const json gaps = json::parse(slurp(out + "/fairness/fairness.json"));
  CHECK(gaps.is_object());

  // AGE_BAND without bin edges is a configuration error.
  json no_edges = tiny_config(41);
  no_edges["metrics"] = {{"group_columns", json::array({"AGE_BAND"})}};
  const std::string bad_cfg = write_config(tmp, "bad.json", no_edges);
  CHECK(run({"fairness-audit", "--config", bad_cfg, "--out", out}).rc == 1);
}

TEST_CASE("report falls back to the first row when no logistic baseline exists") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(43));
  const std::string out = tmp.file("out");
  REQUIRE(run({"features", "--config", cfg, "--out", out}).rc == 0);
  REQUIRE(run({"train-tabular", "--config", cfg, "--out", out}).rc == 0);
  fs::remove(out + "/scores/logistic_test.csv");
  fs::remove(out + "/scores/logistic_val.csv");

  const RunResult rep = run({"report", "--config", cfg, "--out", out});
  REQUIRE(rep.rc == 0);
  const std::string md = slurp(out + "/report/model_comparison.md");
  CHECK(md.find("Logistic Regression") == std::string::npos);
  CHECK(md.find("GBDT") != std::string::npos);

  // With no scores at all the report stage refuses and points upstream.
  const std::string empty_out = tmp.file("empty");
  const RunResult none = run({"report", "--config", cfg, "--out", empty_out});
  CHECK(none.rc == 2);
}

#ifdef RELRISK_BIN
TEST_CASE("installed binary: exit codes and artifact bytes match the in-process path") {
  testutil::TempDir tmp;
  const std::string cfg = write_config(tmp, "cfg.json", tiny_config(47));
  const std::string proc_out = tmp.file("proc");
  const std::string bin_out = tmp.file("bin");

  auto shell = [](const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string bin = RELRISK_BIN;
  CHECK(shell(bin + " --help > /dev/null 2>&1") == 0);
  CHECK(shell(bin + " definitely-not-a-command > /dev/null 2>&1") == 1);
  CHECK(shell(bin + " train-tabular --config " + cfg + " --out " + bin_out +
              " > /dev/null 2>&1") == 2);

  REQUIRE(shell(bin + " features --config " + cfg + " --out " + bin_out +
                " > /dev/null 2>&1") == 0);
  REQUIRE(run({"features", "--config", cfg, "--out", proc_out}).rc == 0);
  for (const char* name : {"features/features_raw.bin", "features/splits.csv"})
    CHECK(slurp(bin_out + "/" + name) == slurp(proc_out + "/" + name));
}
#endif
