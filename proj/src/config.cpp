#include "zca/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace zca {

namespace {

struct Entry {
  ConfigKey info;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument(key + ": expected an unsigned integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument(key + ": expected true/false, got '" + v + "'");
}

// shortest text that parses back to the same double
std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename M>
Entry int_entry(std::string key, std::string doc, M member) {
  return {{key, std::move(doc)},
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_int(key, v); },
          [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }};
}

template <typename M>
Entry u64_entry(std::string key, std::string doc, M member) {
  return {{key, std::move(doc)},
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_u64(key, v); },
          [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); }};
}

template <typename M>
Entry real_entry(std::string key, std::string doc, M member) {
  return {{key, std::move(doc)},
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_double(key, v); },
          [member](const ExperimentConfig& c) { return fmt(member(const_cast<ExperimentConfig&>(c))); }};
}

template <typename M>
Entry bool_entry(std::string key, std::string doc, M member) {
  return {{key, std::move(doc)},
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
          [member](const ExperimentConfig& c) {
            return std::string(member(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

#define ZCA_FIELD(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(u64_entry("seed", "master seed for initialisation, data draws and training noise", ZCA_FIELD(seed)));
    t.push_back({{"out", "output directory"},
                 [](ExperimentConfig& c, const std::string& v) { c.out = v; },
                 [](const ExperimentConfig& c) { return c.out; }});
    t.push_back(int_entry("codec.patch", "latent patch factor (image size / latent size)", ZCA_FIELD(patch)));

    t.push_back(int_entry("model.base_width", "channels at the finest U-Net level; deeper levels use twice this", ZCA_FIELD(model.base_width)));
    t.push_back(int_entry("model.depth", "number of downsampling stages", ZCA_FIELD(model.depth)));
    t.push_back(int_entry("model.heads", "attention heads in every zero cross-attention block", ZCA_FIELD(model.heads)));
    t.push_back(int_entry("model.groups", "group-norm groups", ZCA_FIELD(model.groups)));
    t.push_back(int_entry("model.embed_width", "channel width of the exemplar embedder tower", ZCA_FIELD(model.embed_width)));

    t.push_back(int_entry("schedule.steps", "diffusion step count T", ZCA_FIELD(schedule.steps)));
    t.push_back(real_entry("schedule.beta_start", "beta at step 1 (linear schedule)", ZCA_FIELD(schedule.beta_start)));
    t.push_back(real_entry("schedule.beta_end", "beta at step T (linear schedule)", ZCA_FIELD(schedule.beta_end)));

    t.push_back(real_entry("aug.flip_p", "probability of the joint horizontal flip", ZCA_FIELD(augment.flip_p)));
    t.push_back(real_entry("aug.shift_limit", "shift amplitude as a fraction of the image extent", ZCA_FIELD(augment.shift_limit)));
    t.push_back(real_entry("aug.shift_p", "probability of a shift, drawn per stream", ZCA_FIELD(augment.shift_p)));
    t.push_back(real_entry("aug.scale_limit", "relative scale amplitude", ZCA_FIELD(augment.scale_limit)));
    t.push_back(real_entry("aug.scale_p", "probability of a rescale, drawn per stream", ZCA_FIELD(augment.scale_p)));
    t.push_back(real_entry("aug.hsv_limit", "hue rotation amplitude in degrees", ZCA_FIELD(augment.hsv_limit)));
    t.push_back(real_entry("aug.hsv_p", "probability of the joint hue rotation", ZCA_FIELD(augment.hsv_p)));
    t.push_back(real_entry("aug.contrast_limit", "contrast stretch amplitude about 0.5", ZCA_FIELD(augment.contrast_limit)));
    t.push_back(real_entry("aug.contrast_p", "probability of the joint contrast stretch", ZCA_FIELD(augment.contrast_p)));

    t.push_back(int_entry("data.image_h", "image height in pixels", ZCA_FIELD(data.image_h)));
    t.push_back(int_entry("data.image_w", "image width in pixels", ZCA_FIELD(data.image_w)));
    t.push_back(int_entry("data.box_x0", "garment box left edge in the clothing image", ZCA_FIELD(data.box_x0)));
    t.push_back(int_entry("data.box_y0", "garment box top edge in the clothing image", ZCA_FIELD(data.box_y0)));
    t.push_back(int_entry("data.box_x1", "garment box right edge (exclusive)", ZCA_FIELD(data.box_x1)));
    t.push_back(int_entry("data.box_y1", "garment box bottom edge (exclusive)", ZCA_FIELD(data.box_y1)));
    t.push_back(real_entry("data.max_translation", "garment placement translation range in pixels, per axis", ZCA_FIELD(data.max_translation)));
    t.push_back(real_entry("data.max_scale", "garment placement relative scale range", ZCA_FIELD(data.max_scale)));
    t.push_back(real_entry("data.max_rotation", "garment placement rotation range in degrees (at most 15)", ZCA_FIELD(data.max_rotation)));
    t.push_back(int_entry("data.mask_margin", "dilation of the garment mask into the agnostic mask, pixels", ZCA_FIELD(data.mask_margin)));
    t.push_back({{"data.families", "comma-separated texture families: stripes, checkers, glyphs, color_fields"},
                 [](ExperimentConfig& c, const std::string& v) {
                   std::vector<TextureFamily> fams;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) fams.push_back(parse_family(trim(item)));
                   c.data.families = fams;
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (auto f : c.data.families) s += (s.empty() ? "" : ",") + family_name(f);
                   return s;
                 }});

    t.push_back(real_entry("train.lr", "AdamW learning rate for the conditioned phases", ZCA_FIELD(train.lr)));
    t.push_back(real_entry("train.weight_decay", "AdamW decoupled weight decay", ZCA_FIELD(train.weight_decay)));
    t.push_back(int_entry("train.batch_size", "samples per optimiser step", ZCA_FIELD(train.batch_size)));
    t.push_back(int_entry("train.pretrain_iters", "unconditional base-model iterations before freezing", ZCA_FIELD(train.pretrain_iters)));
    t.push_back(real_entry("train.pretrain_lr", "AdamW learning rate for base pretraining", ZCA_FIELD(train.pretrain_lr)));
    t.push_back(int_entry("train.phase1_iters", "iterations of the denoising-only phase", ZCA_FIELD(train.phase1_iters)));
    t.push_back(int_entry("train.phase2_iters", "iterations of the attention-TV finetune phase", ZCA_FIELD(train.phase2_iters)));
    t.push_back(real_entry("train.lambda_atv", "weight of the summed attention TV terms in phase 2", ZCA_FIELD(train.lambda_atv)));
    t.push_back(int_entry("train.train_size", "fixed training pool size; 0 draws fresh samples", ZCA_FIELD(train.train_size)));
    t.push_back(bool_entry("train.augment", "apply the augmentation protocol while training", ZCA_FIELD(train.augment)));
    t.push_back(int_entry("train.heldout_size", "held-out batch size for the loss curve", ZCA_FIELD(train.heldout_size)));
    t.push_back(int_entry("train.log_every", "iterations between held-out evaluations", ZCA_FIELD(train.log_every)));

    t.push_back(int_entry("eval.eval_size", "samples in the evaluation set", ZCA_FIELD(eval.eval_size)));
    t.push_back(u64_entry("eval.eval_seed", "seed of the evaluation set", ZCA_FIELD(eval.eval_seed)));
    t.push_back(int_entry("eval.t_eval", "noising step for attention capture; -1 selects T/2", ZCA_FIELD(eval.t_eval)));
    t.push_back(int_entry("eval.sample_subset", "evaluation samples that are fully sampled for RMSE", ZCA_FIELD(eval.sample_subset)));
    t.push_back(int_entry("eval.sample_steps", "reverse steps used by the sampler", ZCA_FIELD(eval.sample_steps)));
    t.push_back(bool_entry("eval.deterministic_sampler", "use the sigma = 0 update instead of ancestral steps", ZCA_FIELD(eval.deterministic_sampler)));
    return t;
  }();
  return table;
}

#undef ZCA_FIELD

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.info.key == key) return e;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  if (patch < 1) throw std::invalid_argument("codec.patch must be positive");
  if (data.image_h % patch != 0 || data.image_w % patch != 0) {
    throw std::invalid_argument("image size must be divisible by codec.patch");
  }
  if (model.latent_h != data.image_h / patch || model.latent_w != data.image_w / patch) {
    throw std::invalid_argument("model latent size must equal image size / patch");
  }
  if (model.image_h != data.image_h || model.image_w != data.image_w) {
    throw std::invalid_argument("model exemplar size must equal the image size");
  }
  model.validate();
  data.validate();
  augment.validate();
  if (schedule.steps < 1) throw std::invalid_argument("schedule.steps must be positive");
  if (train.batch_size < 1 || train.pretrain_iters < 0 || train.phase1_iters < 0 || train.phase2_iters < 0) {
    throw std::invalid_argument("train: batch size must be positive and iteration counts non-negative");
  }
  if (!(train.lr > 0) || !(train.pretrain_lr > 0) || train.weight_decay < 0) {
    throw std::invalid_argument("train: learning rates must be positive, weight decay non-negative");
  }
  if (train.lambda_atv < 0) throw std::invalid_argument("train.lambda_atv must be non-negative");
  if (train.train_size < 0 || train.heldout_size < 0 || train.log_every < 1) {
    throw std::invalid_argument("train: pool sizes must be non-negative and log_every positive");
  }
  if (eval.eval_size < 0 || eval.sample_subset < 0 || eval.sample_steps < 1 || eval.sample_steps > schedule.steps) {
    throw std::invalid_argument("eval: sizes must be non-negative and 1 <= sample_steps <= T");
  }
  if (t_eval() < 1 || t_eval() > schedule.steps) throw std::invalid_argument("eval.t_eval outside 1..T");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.info);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
  // Latent and exemplar sizes follow the image size and patch factor.
  cfg.model.image_h = cfg.data.image_h;
  cfg.model.image_w = cfg.data.image_w;
  if (cfg.patch > 0) {
    cfg.model.latent_h = cfg.data.image_h / cfg.patch;
    cfg.model.latent_w = cfg.data.image_w / cfg.patch;
  }
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

std::string config_text(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& e : entries()) s += "# " + e.info.doc + "\n" + e.info.key + " = " + e.get(cfg) + "\n";
  return s;
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << config_text(cfg);
}

}  // namespace zca
