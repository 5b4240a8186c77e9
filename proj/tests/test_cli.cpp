#include <catch2/catch_amalgamated.hpp>

#include "kmorph/pipeline.hpp"
#include "kmorph/regressor.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace {

std::string cli() { return KMORPH_CLI_PATH; }

int run(const std::string& args) {
  int status = std::system((cli() + " " + args + " > cli_stdout.txt 2> cli_stderr.txt").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_small_config(const std::string& path) {
  std::ofstream out(path);
  out << "task = box_a\n"
         "cloud_width = 128\n"
         "cloud_height = 96\n"
         "downsample_factor = 2\n"
         "n_data = 12\n"
         "n_aug = 4\n"
         "outer_rounds = 1\n"
         "epochs = 1\n"
         "batch_size = 4\n"
         "channels = 2,2,2,2,2\n"
         "seed = 3\n";
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "kmorph_cli_test") {
    fs::remove_all(path);
    fs::create_directories(path);
    fs::current_path(path);
  }
};

}  // namespace

TEST_CASE("cli") {
  TempDir tmp;
  write_small_config("small.cfg");

  SECTION("no subcommand is a usage error") { CHECK(run("") == 2); }
  SECTION("unknown flag is a usage error") { CHECK(run("generate --nope") == 2); }
  SECTION("unknown task exits 2") {
    CHECK(run("generate --task pyramid --n 1 --out x.kmds") == 2);
    CHECK(slurp("cli_stderr.txt").find("unknown task") != std::string::npos);
  }
  SECTION("missing config file exits 1") {
    CHECK(run("generate --config nope.cfg --out x.kmds") == 1);
  }
  SECTION("bad train mode exits 2") {
    CHECK(run("train --dataset x.kmds --mode fancy --out w.kmwt") == 2);
  }
  SECTION("eval without any method exits 2") {
    CHECK(run("generate --config small.cfg --out ds.kmds") == 0);
    CHECK(run("eval --dataset ds.kmds --out-dir report") == 2);
  }

  SECTION("generate is reproducible and respects --force") {
    REQUIRE(run("generate --config small.cfg --out ds.kmds") == 0);
    auto first = kmorph::file_digest("ds.kmds");
    CHECK(fs::exists("ds.kmds.manifest"));

    // existing output without --force is refused and left untouched
    CHECK(run("generate --config small.cfg --out ds.kmds") == 2);
    CHECK(kmorph::file_digest("ds.kmds") == first);

    REQUIRE(run("generate --config small.cfg --out ds.kmds --force") == 0);
    CHECK(kmorph::file_digest("ds.kmds") == first);

    // a different seed changes the bytes
    REQUIRE(run("generate --config small.cfg --seed 4 --out ds2.kmds") == 0);
    CHECK(kmorph::file_digest("ds2.kmds") != first);

    auto manifest = slurp("ds.kmds.manifest");
    CHECK(manifest.find("command = generate") != std::string::npos);
    CHECK(manifest.find("master_seed = 3") != std::string::npos);
    CHECK(manifest.find("dataset = ds.kmds") != std::string::npos);
  }

  SECTION("train and eval round trip") {
    REQUIRE(run("generate --config small.cfg --out ds.kmds") == 0);
    REQUIRE(run("train --config small.cfg --dataset ds.kmds --mode kmn --out kmn.kmwt") == 0);
    auto out = slurp("cli_stdout.txt");
    CHECK(out.find("mode kmn") != std::string::npos);
    CHECK(out.find("round 1 n_pred=1") != std::string::npos);
    CHECK(fs::exists("kmn.kmwt.loss.csv"));

    REQUIRE(run("train --config small.cfg --dataset ds.kmds --mode baseline "
                "--out base.kmwt") == 0);
    CHECK(slurp("cli_stdout.txt").find("1 training round(s)") != std::string::npos);

    // weights files load and match the dataset geometry
    std::string meta;
    auto w = kmorph::load_weights("kmn.kmwt", &meta);
    CHECK(w.spec.input_width == 64);
    CHECK(w.spec.output_dim == 2);
    CHECK(meta.find("mode=kmn") != std::string::npos);

    REQUIRE(run("eval --dataset ds.kmds --weights kmn.kmwt --baseline-weights base.kmwt "
                "--icp --n-pred 2 --curve 2 --out-dir report") == 0);
    CHECK(fs::exists("report/report.csv"));
    CHECK(fs::exists("report/report.md"));
    CHECK(fs::exists("report/error_vs_iterations.csv"));
    CHECK(fs::exists("report/manifest.txt"));
    CHECK(fs::exists("report/gallery_kmn"));
    auto csv = slurp("report/report.csv");
    CHECK(csv.find("box_a,kmn,test,summed,") != std::string::npos);
    CHECK(csv.find("box_a,baseline,") != std::string::npos);
    CHECK(csv.find("box_a,icp,") != std::string::npos);
    auto printed = slurp("cli_stdout.txt");
    CHECK(printed.find("kmn: summed MAE") != std::string::npos);
    CHECK(printed.find("icp: summed MAE") != std::string::npos);
  }

  SECTION("icp flag rejected for a task with scale parameters") {
    std::ofstream out("c.cfg");
    out << "task = box_c\ncloud_width = 128\ncloud_height = 96\ndownsample_factor = 2\n"
           "n_data = 4\nn_aug = 1\nseed = 1\n";
    out.close();
    REQUIRE(run("generate --config c.cfg --out c.kmds") == 0);
    CHECK(run("eval --dataset c.kmds --icp --out-dir creport") == 2);
    CHECK(slurp("cli_stderr.txt").find("ineligible") != std::string::npos);
  }

  SECTION("render-samples writes images and labels") {
    REQUIRE(run("render-samples --config small.cfg --count 3 --out-dir samples") == 0);
    for (int i = 0; i < 3; ++i) {
      CHECK(fs::exists("samples/sample" + std::to_string(i) + ".pgm"));
      auto label = slurp("samples/sample" + std::to_string(i) + ".txt");
      CHECK(label.find("x_translation = ") != std::string::npos);
      CHECK(label.find("y_translation = ") != std::string::npos);
    }
    CHECK(fs::exists("samples/manifest.txt"));

    // count 0 still succeeds and writes only the manifest
    REQUIRE(run("render-samples --config small.cfg --count 0 --out-dir empty_samples") == 0);
    CHECK(fs::exists("empty_samples/manifest.txt"));
    CHECK_FALSE(fs::exists("empty_samples/sample0.pgm"));
  }

  SECTION("KMORPH_OUT_ROOT redirects relative outputs") {
    fs::create_directories("routed");
    setenv("KMORPH_OUT_ROOT", (tmp.path / "routed").c_str(), 1);
    REQUIRE(run("generate --config small.cfg --out sub/ds.kmds") == 0);
    unsetenv("KMORPH_OUT_ROOT");
    CHECK(fs::exists("routed/sub/ds.kmds"));
    CHECK_FALSE(fs::exists("sub/ds.kmds"));
  }
}
