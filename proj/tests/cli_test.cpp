#include "cli.hpp"

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "esmc/clustering.hpp"
#include "esmc/localization.hpp"
#include "esmc/logit_lens.hpp"
#include "esmc/metrics.hpp"
#include "esmc/tensor_store.hpp"
#include "testkit.hpp"

namespace esmc {
namespace {

namespace fs = std::filesystem;
using testkit::TempDir;

const fs::path kFixtures = ESMC_FIXTURE_DIR;
const fs::path kTiny = kFixtures / "tiny";

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json load(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  const auto b = testkit::read_bytes(p);
  return std::string(b.begin(), b.end());
}

std::vector<std::string> tiny_localize(const fs::path& out) {
  return {"localize",   "--dumps",   (kTiny / "dumps").string(),    "--unembed", (kTiny / "unembed.bin").string(),
          "--vocab",    (kTiny / "vocab.txt").string(),              "--keywords",
          (kTiny / "keywords.txt").string(),                         "--feature", "color",
          "--sidecar",  (kTiny / "sidecar.json").string(),           "--out",     out.string()};
}

std::vector<std::string> tiny_embed(const fs::path& target, const fs::path& out) {
  return {"embed",     "--dumps", (kTiny / "dumps").string(), "--target", target.string(), "--unembed",
          (kTiny / "unembed.bin").string(), "--vocab", (kTiny / "vocab.txt").string(), "--out", out.string()};
}

// Four Gaussian groups written as an embeddings directory with labels.
void write_blob_fixture(const fs::path& emb, const fs::path& labels, std::size_t n = 80) {
  const auto data = testkit::gaussian_blobs(n, 12, 4, 0.1, 2.0, 2.0, 9);
  EmbeddingSet s;
  s.n = static_cast<std::int64_t>(n);
  s.vocab_size = 12;
  s.normalized = false;
  s.source = {"shape", 3, 7};
  std::vector<LabelRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    s.image_ids.push_back("im" + std::to_string(i));
    for (std::size_t d = 0; d < 12; ++d) s.matrix.push_back(static_cast<float>(data.x(i, d)));
    rows.push_back({s.image_ids.back(), "shape", "g" + std::to_string(data.labels[i])});
  }
  write_embeddings(s, emb);
  write_labels(LabelTable(rows), labels);
}

TEST(CliLocalize, PlantedCorpusChoosesPlantedCell) {
  TempDir tmp;
  const auto corpus = testkit::make_planted_corpus({.num_dumps = 10});
  for (const auto& d : corpus.dumps) write_dump(d, tmp / "dumps" / d.image_id);
  write_unembedding(corpus.unembedding, tmp / "unembed.bin");
  write_vocab(corpus.vocab, tmp / "vocab.txt");
  {
    std::ofstream k(tmp / "keywords.txt");
    for (const auto& w : corpus.keywords) k << w << "\n";
  }
  const std::vector<std::string> args = {"localize", "--dumps", (tmp / "dumps").string(), "--unembed",
                                         (tmp / "unembed.bin").string(), "--vocab", (tmp / "vocab.txt").string(),
                                         "--keywords", (tmp / "keywords.txt").string(), "--feature", "color",
                                         "--out", (tmp / "target.json").string()};
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto t = read_target(tmp / "target.json");
  EXPECT_EQ(t.chosen, (Cell{27, 263}));
  EXPECT_EQ(t.num_images, 10);
  EXPECT_NE(r.out.find("263"), std::string::npos);

  auto sampled = args;
  sampled.back() = (tmp / "sampled.json").string();
  sampled.insert(sampled.end(), {"--num-samples", "3", "--seed", "5"});
  ASSERT_EQ(run(sampled).code, 0);
  EXPECT_EQ(read_target(tmp / "sampled.json").chosen, (Cell{27, 263}));
  EXPECT_EQ(read_target(tmp / "sampled.json").num_images, 3);
}

TEST(CliLocalize, TinyFixtureWithSidecar) {
  TempDir tmp;
  const auto r = run(tiny_localize(tmp / "t.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto t = read_target(tmp / "t.json");
  EXPECT_EQ(t.chosen, (Cell{1, 2}));
  EXPECT_EQ(t.keywords, (std::vector<std::string>{"red", "blue", "\xE2\x96\x81silver"}));
  EXPECT_EQ(t.candidates.front().count, 4);

  auto no_sidecar = tiny_localize(tmp / "t2.json");
  no_sidecar.erase(no_sidecar.begin() + 11, no_sidecar.begin() + 13);
  const auto r2 = run(no_sidecar);
  ASSERT_EQ(r2.code, 0) << r2.err;
  EXPECT_NE(r2.err.find("silver"), std::string::npos);
  EXPECT_EQ(read_target(tmp / "t2.json").candidates.front().count, 3);
}

TEST(CliLocalize, MissingKeywordsFileNamesPath) {
  TempDir tmp;
  auto args = tiny_localize(tmp / "t.json");
  args[8] = "/no/such/keywords.txt";
  const auto r = run(args);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/no/such/keywords.txt"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "t.json"));
}

TEST(CliLocalize, TauOutOfRange) {
  TempDir tmp;
  auto args = tiny_localize(tmp / "t.json");
  args.insert(args.end(), {"--tau", "1.5"});
  const auto r = run(args);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("tau"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "t.json"));
}

TEST(CliEmbed, RowsMatchLogitLens) {
  TempDir tmp;
  ASSERT_EQ(run(tiny_localize(tmp / "t.json")).code, 0);
  const auto r = run(tiny_embed(tmp / "t.json", tmp / "emb"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto set = read_embeddings(tmp / "emb");
  EXPECT_EQ(set.n, 4);
  EXPECT_EQ(set.vocab_size, 8);
  EXPECT_EQ(fs::file_size(tmp / "emb" / "embeds.bin"), 4u * 8u * 4u);
  EXPECT_EQ(set.source, (EmbeddingSource{"color", 1, 2}));
  EXPECT_TRUE(set.normalized);

  const auto w = read_unembedding(kTiny / "unembed.bin", 8, 8);
  for (std::int64_t i = 0; i < set.n; ++i) {
    const auto dump = read_dump(kTiny / "dumps" / set.image_ids[static_cast<std::size_t>(i)]);
    const auto cells = project_dump(dump, w, {std::vector<std::int64_t>{1}, std::vector<std::int64_t>{2}, true});
    const auto& expected = cells.at({1, 2}).values;
    for (std::int64_t v = 0; v < 8; ++v) {
      EXPECT_EQ(set.row(i)[static_cast<std::size_t>(v)], static_cast<float>(expected[static_cast<std::size_t>(v)]));
    }
  }

  auto raw = tiny_embed(tmp / "t.json", tmp / "raw");
  raw.push_back("--raw-logits");
  ASSERT_EQ(run(raw).code, 0);
  EXPECT_FALSE(read_embeddings(tmp / "raw").normalized);
  EXPECT_FALSE(load(tmp / "raw" / "manifest.json")["normalized"].get<bool>());
}

TEST(CliEmbed, MissingCellNamesImageAndLeavesNothing) {
  TempDir tmp;
  TargetSpec t;
  t.feature = "color";
  t.chosen = {5, 0};
  t.candidates = {{5, 0, 1, 0.5}};
  t.keywords = {"red"};
  write_target(t, tmp / "t.json");
  const auto r = run(tiny_embed(tmp / "t.json", tmp / "emb"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("img_a"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "emb"));
  EXPECT_FALSE(fs::exists(tmp / ".emb.partial"));
}

TEST(CliCluster, DeterministicAcrossReruns) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv");
  const std::vector<std::string> args = {"cluster", "--embeddings", (tmp / "emb").string(), "--k", "4", "--alpha",
                                         "0.3", "--seed", "42", "--hidden", "32", "--out", (tmp / "run").string()};
  ASSERT_EQ(run(args).code, 0);
  const auto first_csv = slurp(tmp / "run" / "assignments.csv");
  const auto first_hist = slurp(tmp / "run" / "history.json");
  const auto first_pseudo = slurp(tmp / "run" / "pseudo_labels.json");
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(slurp(tmp / "run" / "assignments.csv"), first_csv);
  EXPECT_EQ(slurp(tmp / "run" / "history.json"), first_hist);
  EXPECT_EQ(slurp(tmp / "run" / "pseudo_labels.json"), first_pseudo);

  EXPECT_EQ(first_csv.rfind("image_id,cluster\n", 0), 0u);
  const auto h = load(tmp / "run" / "history.json");
  EXPECT_EQ(h["loss"].size(), 100u);
  EXPECT_EQ(h["config"]["k"], 4);
  const auto p = load(tmp / "run" / "pseudo_labels.json");
  std::size_t selected = 0;
  for (const auto& c : p["clusters"]) selected += c["selected"].size();
  EXPECT_EQ(selected, 4u * pseudo_label_quota(0.3, 20));
}

TEST(CliCluster, SkipHeadIsRawKMeans) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv");
  ASSERT_EQ(run({"cluster", "--embeddings", (tmp / "emb").string(), "--k", "4", "--seed", "3", "--skip-head", "--out",
                 (tmp / "run").string()})
                .code,
            0);
  const auto km = kmeans_fit(to_matrix(read_embeddings(tmp / "emb")), 4, 3);
  std::string expected = "image_id,cluster\n";
  for (std::size_t i = 0; i < km.assignments.size(); ++i) {
    expected += "im" + std::to_string(i) + "," + std::to_string(km.assignments[i]) + "\n";
  }
  EXPECT_EQ(slurp(tmp / "run" / "assignments.csv"), expected);
  EXPECT_TRUE(load(tmp / "run" / "history.json")["loss"].empty());
}

TEST(CliCluster, RejectsBadKAndAlpha) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 8);
  auto r = run({"cluster", "--embeddings", (tmp / "emb").string(), "--k", "9", "--out", (tmp / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("exceeds"), std::string::npos);
  r = run({"cluster", "--embeddings", (tmp / "emb").string(), "--k", "2", "--alpha", "0", "--out",
           (tmp / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(tmp / "run"));
}

TEST(CliCluster, SavedHeadReadsBack) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 20);
  ASSERT_EQ(run({"cluster", "--embeddings", (tmp / "emb").string(), "--k", "4", "--hidden", "8", "--save-head",
                 "--out", (tmp / "run").string()})
                .code,
            0);
  const auto head = read_head(tmp / "run" / "head");
  EXPECT_EQ(head.hidden(), 8u);
  EXPECT_EQ(head.classes(), 4u);
  EXPECT_EQ(head.input_dim(), 12u);
}

TEST(CliEval, IdenticalLabelFiles) {
  TempDir tmp;
  const auto r = run({"eval", "--predictions", (kTiny / "labels.csv").string(), "--labels",
                      (kTiny / "labels.csv").string(), "--criterion", "color", "--out", (tmp / "r.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = load(tmp / "r.json");
  EXPECT_EQ(j["nmi"].get<double>(), 1.0);
  EXPECT_EQ(j["rand_index"].get<double>(), 1.0);
  EXPECT_EQ(j["n"], 4);
}

TEST(CliEval, MetricsFixture) {
  TempDir tmp;
  const auto r = run({"eval", "--predictions", (kFixtures / "metrics" / "predictions.csv").string(), "--labels",
                      (kFixtures / "metrics" / "labels.csv").string(), "--criterion", "shape", "--out",
                      (tmp / "r.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = load(tmp / "r.json");
  EXPECT_NEAR(j["nmi"].get<double>(), 0.4325380677663125622843646, 1e-12);
  const std::vector<Label> pred{0, 0, 1, 1, 1}, truth{0, 0, 0, 1, 1};
  EXPECT_EQ(j["rand_index"].get<double>(), rand_index(pred, truth));
  EXPECT_NE(r.out.find("0.432538"), std::string::npos);
}

TEST(CliEval, UnknownCriterionListsAvailable) {
  TempDir tmp;
  const auto r = run({"eval", "--predictions", (kTiny / "labels.csv").string(), "--labels",
                      (kTiny / "labels.csv").string(), "--criterion", "species", "--out", (tmp / "r.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("brand, color"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "r.json"));
}

TEST(CliEval, UnlabeledPredictionIdsAreListed) {
  TempDir tmp;
  {
    std::ofstream p(tmp / "pred.csv");
    p << "image_id,cluster\nimg_a,0\nimg_zz,1\nimg_b,1\nimg_qq,0\n";
  }
  const auto r = run({"eval", "--predictions", (tmp / "pred.csv").string(), "--labels", (kTiny / "labels.csv").string(),
                      "--criterion", "color", "--out", (tmp / "r.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("img_zz, img_qq"), std::string::npos);
}

std::vector<std::string> sweep_args(const TempDir& tmp, const std::string& alphas, const std::string& seeds) {
  return {"sweep",    "--embeddings", (tmp / "emb").string(), "--labels", (tmp / "labels.csv").string(),
          "--criterion", "shape",     "--alphas", alphas,     "--seeds",  seeds,
          "--hidden", "16",           "--epochs", "20",       "--out",    (tmp / "sweep.csv").string()};
}

TEST(CliSweep, RowCounts) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 40);
  const auto r = run(sweep_args(tmp, "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", "0,1,2,3,4"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(tmp / "sweep.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "kind,alpha,seed,nmi,ri,nmi_std,ri_std");
  int runs = 0, summaries = 0;
  while (std::getline(csv, line)) {
    runs += line.rfind("run,", 0) == 0;
    summaries += line.rfind("summary,", 0) == 0;
  }
  EXPECT_EQ(runs, 45);
  EXPECT_EQ(summaries, 9);

  const auto first = slurp(tmp / "sweep.csv");
  ASSERT_EQ(run(sweep_args(tmp, "0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1", "4,3,2,1,0")).code, 0);
  EXPECT_EQ(slurp(tmp / "sweep.csv"), first);
}

TEST(CliSweep, SingleAlphaEqualsClusterThenEval) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 40);
  ASSERT_EQ(run(sweep_args(tmp, "0.3", "7")).code, 0);
  ASSERT_EQ(run({"cluster", "--embeddings", (tmp / "emb").string(), "--k", "4", "--alpha", "0.3", "--seed", "7",
                 "--hidden", "16", "--epochs", "20", "--out", (tmp / "run").string()})
                .code,
            0);
  ASSERT_EQ(run({"eval", "--predictions", (tmp / "run" / "assignments.csv").string(), "--labels",
                 (tmp / "labels.csv").string(), "--criterion", "shape", "--out", (tmp / "r.json").string()})
                .code,
            0);
  const auto report = load(tmp / "r.json");

  std::istringstream csv(slurp(tmp / "sweep.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  std::vector<std::string> f;
  std::stringstream ss(row);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  ASSERT_GE(f.size(), 5u);
  EXPECT_EQ(std::stod(f[3]), report["nmi"].get<double>());
  EXPECT_EQ(std::stod(f[4]), report["rand_index"].get<double>());
}

TEST(CliSweep, EmptyAlphaList) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 8);
  const auto r = run(sweep_args(tmp, "", "0"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("empty"), std::string::npos);
  EXPECT_FALSE(fs::exists(tmp / "sweep.csv"));
}

TEST(CliPipeline, EveryStageIsIdempotent) {
  TempDir tmp;
  auto stage = [&](const std::vector<std::string>& args) { ASSERT_EQ(run(args).code, 0); };
  const std::vector<std::vector<std::string>> stages = {
      tiny_localize(tmp / "t.json"),
      tiny_embed(tmp / "t.json", tmp / "emb"),
      {"cluster", "--embeddings", (tmp / "emb").string(), "--k", "3", "--seed", "1", "--out",
       (tmp / "run").string()},
      {"eval", "--predictions", (tmp / "run" / "assignments.csv").string(), "--labels",
       (kTiny / "labels.csv").string(), "--criterion", "color", "--run", (tmp / "run").string(), "--out",
       (tmp / "report.json").string()},
  };
  const std::vector<fs::path> outputs = {tmp / "t.json", tmp / "emb" / "embeds.bin", tmp / "emb" / "manifest.json",
                                         tmp / "run" / "assignments.csv", tmp / "run" / "history.json",
                                         tmp / "report.json"};
  for (const auto& s : stages) stage(s);
  std::vector<std::string> first;
  for (const auto& p : outputs) first.push_back(slurp(p));
  for (const auto& s : stages) stage(s);
  for (std::size_t i = 0; i < outputs.size(); ++i) EXPECT_EQ(slurp(outputs[i]), first[i]) << outputs[i];

  const auto report = load(tmp / "report.json");
  EXPECT_EQ(report["nmi"].get<double>(), 1.0);
  EXPECT_EQ(report["config"]["seed"], "1");
}

TEST(CliConfig, FlatKeysWithFlagOverride) {
  TempDir tmp;
  write_blob_fixture(tmp / "emb", tmp / "labels.csv", 20);
  {
    std::ofstream c(tmp / "esmc.toml");
    c << "# run settings\nk = 4\nalpha = 0.5\nseed = 11\nskip_head = true\nmax-iters = 50\ntau = 0.3\n"
         "[cluster]\nhidden = 8\n";
  }
  const auto r = run({"--config", (tmp / "esmc.toml").string(), "cluster", "--embeddings", (tmp / "emb").string(),
                      "--alpha", "0.25", "--out", (tmp / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = load(tmp / "run" / "history.json")["config"];
  EXPECT_EQ(cfg["k"], 4);
  EXPECT_EQ(cfg["alpha"].get<double>(), 0.25);
  EXPECT_EQ(cfg["seed"], 11);
  EXPECT_EQ(cfg["skip_head"], true);
  EXPECT_EQ(cfg["max_iters"], 50);
  EXPECT_EQ(cfg["hidden"], 8);

  const auto missing = run({"--config", (tmp / "nope.toml").string(), "cluster", "--embeddings",
                            (tmp / "emb").string(), "--k", "2"});
  EXPECT_EQ(missing.code, 2);
}

TEST(CliHelp, DocumentsDefaults) {
  auto r = run({"localize", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("[0.2]"), std::string::npos);
  EXPECT_NE(r.out.find("published"), std::string::npos);
  r = run({"cluster", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("[512]"), std::string::npos);
  EXPECT_NE(r.out.find("[100]"), std::string::npos);
  for (const char* sub : {"embed", "eval", "sweep"}) EXPECT_EQ(run({sub, "--help"}).code, 0);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
}

}  // namespace
}  // namespace esmc
