#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "zca/checkpoint.hpp"
#include "zca/config.hpp"
#include "zca/train.hpp"

using namespace zca;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("config text parsing") {
  ExperimentConfig cfg;
  apply_config_text(cfg,
                    "# comment line\n"
                    "seed = 17\n"
                    "  train.lr=0.0005   # trailing comment\n"
                    "\n"
                    "aug.flip_p = 0\n"
                    "data.families = stripes, glyphs\n"
                    "train.augment = false\n",
                    "inline");
  CHECK(cfg.seed == 17);
  CHECK(cfg.train.lr == 0.0005);
  CHECK(cfg.augment.flip_p == 0);
  CHECK(cfg.data.families == std::vector<TextureFamily>{TextureFamily::stripes, TextureFamily::glyphs});
  CHECK_FALSE(cfg.train.augment);

  CHECK_THROWS_AS(apply_config_text(cfg, "no.such.key = 1\n", "inline"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_text(cfg, "train.lr\n", "inline"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "train.batch_size", "many"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "data.families", "plaid"), std::invalid_argument);
}

TEST_CASE("every documented key round-trips through the text form") {
  ExperimentConfig cfg;
  cfg.seed = 99;
  cfg.train.lambda_atv = 0.25;
  cfg.augment.hsv_limit = 3;
  cfg.eval.deterministic_sampler = true;
  const fs::path dir = scratch("zca_cfg_test");
  save_config(dir / "c.txt", cfg);
  const ExperimentConfig back = load_config(dir / "c.txt");
  CHECK(config_text(back) == config_text(cfg));
  for (const auto& k : config_keys()) {
    CHECK_FALSE(k.doc.empty());
    CHECK(get_config_value(back, k.key) == get_config_value(cfg, k.key));
  }
  std::ifstream in(dir / "c.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  for (const auto& k : config_keys()) CHECK(ss.str().find("\n" + k.key + " = ") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("config validation") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.t_eval() == 500);
  ExperimentConfig bad = cfg;
  set_config_value(bad, "train.phase2_iters", "-1");
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  set_config_value(bad, "train.lambda_atv", "-0.5");
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  set_config_value(bad, "data.image_w", "50");
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("little-endian blobs") {
  const fs::path dir = scratch("zca_blob_test");
  write_f32_blob(dir / "a.f32", {1.0f, -2.5f});
  std::ifstream in(dir / "a.f32", std::ios::binary);
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  const unsigned char want[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  CHECK(std::memcmp(bytes, want, 8) == 0);
  CHECK(read_f32_blob(dir / "a.f32") == std::vector<float>{1.0f, -2.5f});
  write_f64_blob(dir / "b.f64", {0.1, 1e-300});
  CHECK(read_f64_blob(dir / "b.f64") == std::vector<double>{0.1, 1e-300});
  CHECK(fs::file_size(dir / "b.f64") == 16);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip is bitwise") {
  ExperimentConfig cfg;
  cfg.model.base_width = 8;
  cfg.model.groups = 2;
  ConditionedUNet<float> net(cfg.model, 12);
  apply_freeze_policy(net.params(), TrainStage::phase1);
  const NoiseSchedule sched = schedule_from(cfg);
  const fs::path dir = scratch("zca_ckpt_test");
  save_checkpoint(dir / "ck", to_checkpoint(net, cfg, sched, "phase1", 7));
  CHECK(fs::exists(dir / "ck" / "manifest.txt"));
  CHECK(fs::file_size(dir / "ck" / "params.f32") == 4 * net.params().element_count());
  CHECK(fs::file_size(dir / "ck" / "schedule.f64") == 8 * 2 * static_cast<std::uintmax_t>(sched.steps));

  const Checkpoint back = load_checkpoint(dir / "ck");
  CHECK(back.meta.at("stage") == "phase1");
  CHECK(back.meta.at("iterations") == "7");
  CHECK(back.model.base_width == 8);
  CHECK(back.schedule.alpha_bar == sched.alpha_bar);
  CHECK(back.schedule.beta == sched.beta);
  REQUIRE(back.params.size() == net.params().size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    const auto& a = back.params[static_cast<int>(i)];
    const auto& b = net.params()[static_cast<int>(i)];
    CHECK(a.name == b.name);
    CHECK(a.group == b.group);
    CHECK(a.frozen == b.frozen);
    CHECK(a.value.shape() == b.value.shape());
    CHECK(std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(float)) == 0);
  }
  fs::remove(dir / "ck" / "params.f32");
  CHECK_THROWS(load_checkpoint(dir / "ck"));
  fs::remove_all(dir);
}
