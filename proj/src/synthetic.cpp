#include "zca/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace zca {

Affine2 Affine2::inverse() const {
  const double dt = det();
  if (!std::isfinite(dt) || std::abs(dt) < 1e-12) throw std::domain_error("affine transform is not invertible");
  Affine2 r;
  r.a = e / dt;
  r.b = -b / dt;
  r.d = -d / dt;
  r.e = a / dt;
  r.c = -(r.a * c + r.b * f);
  r.f = -(r.d * c + r.e * f);
  return r;
}

Affine2 Affine2::after(const Affine2& o) const {
  Affine2 r;
  r.a = a * o.a + b * o.d;
  r.b = a * o.b + b * o.e;
  r.c = a * o.c + b * o.f + c;
  r.d = d * o.a + e * o.d;
  r.e = d * o.b + e * o.e;
  r.f = d * o.c + e * o.f + f;
  return r;
}

Affine2 Affine2::translation(double dx, double dy) { return {1, 0, dx, 0, 1, dy}; }

Affine2 Affine2::similarity(double s, double degrees, double cx, double cy) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = s * std::cos(th), sn = s * std::sin(th);
  // p' = C + sR (p - C)
  return {cs, -sn, cx - cs * cx + sn * cy, sn, cs, cy - sn * cx - cs * cy};
}

Affine2 Affine2::flip_x(double width) { return {-1, 0, width, 0, 1, 0}; }

namespace {

Affine2 placement(const DatasetConfig& cfg, double s, double deg, double tx, double ty) {
  const Box b = cfg.texture_box();
  const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
  return Affine2::translation(tx, ty).after(Affine2::similarity(s, deg, cx, cy));
}

bool corners_inside(const DatasetConfig& cfg, const Affine2& t) {
  const Box b = cfg.texture_box();
  for (double x : {b.x0, b.x1}) {
    for (double y : {b.y0, b.y1}) {
      auto p = t.apply(x, y);
      if (p[0] < 0 || p[0] > cfg.image_w || p[1] < 0 || p[1] > cfg.image_h) return false;
    }
  }
  return true;
}

using Rgb = std::array<double, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1));
  const double m = v - c;
  Rgb rgb{};
  if (h < 60) rgb = {c, x, 0};
  else if (h < 120) rgb = {x, c, 0};
  else if (h < 180) rgb = {0, c, x};
  else if (h < 240) rgb = {0, x, c};
  else if (h < 300) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

Rgb random_color(Rng& rng) { return hsv_to_rgb(rng.uniform(0, 360), rng.uniform(0.45, 0.9), rng.uniform(0.35, 0.95)); }

// Procedural texture evaluated at texture-pixel (col, row) relative to the box origin.
struct Texture {
  TextureFamily family;
  std::vector<Rgb> colors;
  int period = 6;
  int orientation = 0;
  int cols = 2, rows = 2;
  int box_w = 1, box_h = 1;
  std::vector<std::uint32_t> glyphs;  // 25-bit bitmaps, one per 8x8 cell
  std::vector<int> ink;

  Rgb at(int c, int r) const {
    switch (family) {
      case TextureFamily::stripes: {
        const int coord = orientation == 0 ? r : orientation == 1 ? c : r + c;
        return colors[static_cast<std::size_t>((coord / period) % static_cast<int>(colors.size()))];
      }
      case TextureFamily::checkers:
        return colors[static_cast<std::size_t>(((c / period) + (r / period)) % 2)];
      case TextureFamily::glyphs: {
        const int gc = c / 8, gr = r / 8, lc = c % 8 - 1, lr = r % 8 - 1;
        const int cells_w = (box_w + 7) / 8;
        const std::size_t cell = static_cast<std::size_t>(gr * cells_w + gc);
        if (lc >= 0 && lc < 5 && lr >= 0 && lr < 5 && ((glyphs[cell] >> (lr * 5 + lc)) & 1u)) {
          return colors[static_cast<std::size_t>(ink[cell])];
        }
        return colors[0];
      }
      case TextureFamily::color_fields: {
        const int fc = std::min(cols - 1, c * cols / box_w);
        const int fr = std::min(rows - 1, r * rows / box_h);
        return colors[static_cast<std::size_t>(fr * cols + fc)];
      }
    }
    return colors[0];
  }
};

Texture random_texture(Rng& rng, TextureFamily family, int box_w, int box_h) {
  Texture t;
  t.family = family;
  t.box_w = box_w;
  t.box_h = box_h;
  switch (family) {
    case TextureFamily::stripes:
      t.orientation = rng.uniform_int(0, 2);
      t.period = rng.uniform_int(4, 12);
      for (int i = 0, n = rng.uniform_int(2, 3); i < n; ++i) t.colors.push_back(random_color(rng));
      break;
    case TextureFamily::checkers:
      t.period = rng.uniform_int(6, 12);
      t.colors = {random_color(rng), random_color(rng)};
      break;
    case TextureFamily::glyphs: {
      for (int i = 0; i < 4; ++i) t.colors.push_back(random_color(rng));
      const int cells = ((box_w + 7) / 8) * ((box_h + 7) / 8);
      for (int i = 0; i < cells; ++i) {
        t.glyphs.push_back(static_cast<std::uint32_t>(rng.next_u64() & 0x1ffffffu));
        t.ink.push_back(rng.uniform_int(1, 3));
      }
      break;
    }
    case TextureFamily::color_fields:
      t.cols = rng.uniform_int(2, 4);
      t.rows = rng.uniform_int(2, 4);
      for (int i = 0; i < t.cols * t.rows; ++i) t.colors.push_back(random_color(rng));
      break;
  }
  return t;
}

Tensor<double> dilate(const Tensor<double>& mask, int margin) {
  const int h = mask.dim(1), w = mask.dim(2);
  Tensor<double> out(mask.shape());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double v = 0;
      for (int dr = -margin; dr <= margin && v == 0; ++dr) {
        for (int dc = -margin; dc <= margin; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < h && cc >= 0 && cc < w && mask.at(0, rr, cc) > 0.5) {
            v = 1;
            break;
          }
        }
      }
      out.at(0, r, c) = v;
    }
  }
  return out;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void DatasetConfig::validate() const {
  if (image_h < 8 || image_w < 8) throw std::invalid_argument("dataset: image too small");
  if (box_x0 < 0 || box_y0 < 0 || box_x1 > image_w || box_y1 > image_h || box_x0 >= box_x1 || box_y0 >= box_y1) {
    throw std::invalid_argument("dataset: garment box must lie inside the image");
  }
  if (max_translation < 0 || max_scale < 0 || max_scale >= 1 || max_rotation < 0 || max_rotation > 15) {
    throw std::invalid_argument("dataset: transform ranges must be non-negative, scale < 1, rotation <= 15 degrees");
  }
  if (mask_margin < 0) throw std::invalid_argument("dataset: mask_margin must be non-negative");
  if (families.empty()) throw std::invalid_argument("dataset: no texture families");
  for (double s : {1 - max_scale, 1 + max_scale}) {
    for (int k = 0; k <= 6; ++k) {
      const double deg = -max_rotation + k * max_rotation / 3.0;
      for (double tx : {-max_translation, max_translation}) {
        for (double ty : {-max_translation, max_translation}) {
          if (!corners_inside(*this, placement(*this, s, deg, tx, ty))) {
            throw std::invalid_argument("dataset: transform ranges can push the garment off the canvas");
          }
        }
      }
    }
  }
}

double sample_bilinear(const Tensor<double>& img, int ch, double x, double y, double fill) {
  const int h = img.dim(1), w = img.dim(2);
  const double fx = x - 0.5, fy = y - 0.5;
  const int c0 = static_cast<int>(std::floor(fx)), r0 = static_cast<int>(std::floor(fy));
  const double wx = fx - c0, wy = fy - r0;
  auto px = [&](int r, int c) { return (r < 0 || r >= h || c < 0 || c >= w) ? fill : img.at(ch, r, c); };
  double v = 0;
  if (wy < 1) {
    if (wx < 1) v += (1 - wx) * (1 - wy) * px(r0, c0);
    if (wx > 0) v += wx * (1 - wy) * px(r0, c0 + 1);
  }
  if (wy > 0) {
    if (wx < 1) v += (1 - wx) * wy * px(r0 + 1, c0);
    if (wx > 0) v += wx * wy * px(r0 + 1, c0 + 1);
  }
  return v;
}

SyntheticSample render_sample(Rng& rng, const DatasetConfig& cfg, TextureFamily family, const Affine2& place) {
  cfg.validate();
  if (!corners_inside(cfg, place)) throw std::invalid_argument("render_sample: garment leaves the canvas");
  const int H = cfg.image_h, W = cfg.image_w;
  const Box box = cfg.texture_box();
  const int bw = cfg.box_x1 - cfg.box_x0, bh = cfg.box_y1 - cfg.box_y0;
  const Texture tex = random_texture(rng, family, bw, bh);

  SyntheticSample s;
  s.family = family;
  s.texture_box = box;
  s.clothing_from_texture = Affine2{};
  s.person_from_texture = place;

  s.clothing = ImageTensor({3, H, W}, 0.85);
  for (int r = cfg.box_y0; r < cfg.box_y1; ++r) {
    for (int c = cfg.box_x0; c < cfg.box_x1; ++c) {
      const Rgb v = tex.at(c - cfg.box_x0, r - cfg.box_y0);
      for (int ch = 0; ch < 3; ++ch) s.clothing.at(ch, r, c) = v[static_cast<std::size_t>(ch)];
    }
  }

  const Rgb bg = hsv_to_rgb(rng.uniform(0, 360), rng.uniform(0.05, 0.25), rng.uniform(0.55, 0.9));
  const Rgb skin = hsv_to_rgb(rng.uniform(15, 35), rng.uniform(0.3, 0.6), rng.uniform(0.45, 0.9));
  const Affine2 inv = place.inverse();
  const auto head = place.apply(0.5 * (box.x0 + box.x1), box.y0 - 6.0);
  s.person = ImageTensor({3, H, W});
  s.pose = ImageTensor({3, H, W});
  s.garment_mask = Tensor<double>({1, H, W});
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const double x = c + 0.5, y = r + 0.5;
      const auto t = inv.apply(x, y);
      Rgb v = bg;
      const double shade = 0.9 + 0.1 * y / H;
      for (auto& ch : v) ch *= shade;
      const double hx = x - head[0], hy = y - head[1];
      if (box.contains(t[0], t[1], -3.0) || hx * hx + hy * hy <= 36.0) v = skin;
      if (box.contains(t[0], t[1], 0.5)) {
        const auto q = s.clothing_from_texture.apply(t[0], t[1]);
        for (int ch = 0; ch < 3; ++ch) v[static_cast<std::size_t>(ch)] = sample_bilinear(s.clothing, ch, q[0], q[1], 0.85);
        s.garment_mask.at(0, r, c) = 1;
        s.pose.at(0, r, c) = (t[0] - box.x0) / (box.x1 - box.x0);
        s.pose.at(1, r, c) = (t[1] - box.y0) / (box.y1 - box.y0);
        s.pose.at(2, r, c) = 1;
      }
      for (int ch = 0; ch < 3; ++ch) s.person.at(ch, r, c) = std::clamp(v[static_cast<std::size_t>(ch)], 0.0, 1.0);
    }
  }
  s.agnostic_mask = dilate(s.garment_mask, cfg.mask_margin);
  s.agnostic = s.person;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (s.agnostic_mask.at(0, r, c) > 0.5) {
        for (int ch = 0; ch < 3; ++ch) s.agnostic.at(ch, r, c) = kNeutralGray;
      }
    }
  }
  return s;
}

SyntheticSample generate_sample(Rng& rng, const DatasetConfig& cfg) {
  cfg.validate();
  const auto fam = cfg.families[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.families.size()) - 1))];
  const double s = 1 + rng.uniform(-cfg.max_scale, cfg.max_scale);
  const double deg = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
  const double tx = rng.uniform(-cfg.max_translation, cfg.max_translation);
  const double ty = rng.uniform(-cfg.max_translation, cfg.max_translation);
  return render_sample(rng, cfg, fam, placement(cfg, s, deg, tx, ty));
}

Tensor<int> correspondence_truth(const SyntheticSample& s, int query_h, int query_w, int key_h, int key_w) {
  if (query_h < 1 || query_w < 1 || key_h < 1 || key_w < 1) throw std::invalid_argument("correspondence_truth: bad dims");
  const int H = s.person.dim(1), W = s.person.dim(2);
  const int Hc = s.clothing.dim(1), Wc = s.clothing.dim(2);
  const Affine2 texture_from_person = s.person_from_texture.inverse();
  s.clothing_from_texture.inverse();  // rejects degenerate clothing placement
  Tensor<int> out({query_h, query_w}, kNoCorrespondence);
  for (int i = 0; i < query_h; ++i) {
    for (int j = 0; j < query_w; ++j) {
      const double x = (j + 0.5) * W / query_w, y = (i + 0.5) * H / query_h;
      const auto t = texture_from_person.apply(x, y);
      if (!s.texture_box.contains(t[0], t[1], 0.5)) continue;
      const auto q = s.clothing_from_texture.apply(t[0], t[1]);
      const int kr = static_cast<int>(std::floor(q[1] * key_h / Hc));
      const int kc = static_cast<int>(std::floor(q[0] * key_w / Wc));
      if (kr < 0 || kr >= key_h || kc < 0 || kc >= key_w) continue;
      out[static_cast<std::size_t>(i * query_w + j)] = kr * key_w + kc;
    }
  }
  return out;
}

ImageTensor rewarp_garment(const SyntheticSample& s) {
  const int H = s.person.dim(1), W = s.person.dim(2);
  const Affine2 inv = s.truth_transform().inverse();
  ImageTensor out({3, H, W});
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (s.garment_mask.at(0, r, c) < 0.5) continue;
      const auto q = inv.apply(c + 0.5, r + 0.5);
      for (int ch = 0; ch < 3; ++ch) out.at(ch, r, c) = sample_bilinear(s.clothing, ch, q[0], q[1], 0.85);
    }
  }
  return out;
}

std::string family_name(TextureFamily f) {
  switch (f) {
    case TextureFamily::stripes: return "stripes";
    case TextureFamily::checkers: return "checkers";
    case TextureFamily::glyphs: return "glyphs";
    case TextureFamily::color_fields: return "color_fields";
  }
  return "stripes";
}

TextureFamily parse_family(const std::string& name) {
  for (auto f : {TextureFamily::stripes, TextureFamily::checkers, TextureFamily::glyphs, TextureFamily::color_fields}) {
    if (family_name(f) == name) return f;
  }
  throw std::invalid_argument("unknown texture family '" + name + "'");
}

namespace {

std::string affine_str(const Affine2& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g", t.a, t.b, t.c, t.d, t.e, t.f);
  return buf;
}

Affine2 parse_affine(const std::string& s) {
  std::istringstream in(s);
  Affine2 t;
  if (!(in >> t.a >> t.b >> t.c >> t.d >> t.e >> t.f)) throw std::runtime_error("bad affine '" + s + "'");
  return t;
}

}  // namespace

void save_sample(const std::filesystem::path& dir, const SyntheticSample& s) {
  std::filesystem::create_directories(dir);
  write_ppm(dir / "person.ppm", s.person);
  write_ppm(dir / "clothing.ppm", s.clothing);
  write_ppm(dir / "agnostic.ppm", s.agnostic);
  write_ppm(dir / "pose.ppm", s.pose);
  write_pgm(dir / "agnostic_mask.pgm", s.agnostic_mask);
  write_pgm(dir / "garment_mask.pgm", s.garment_mask);
  std::ofstream out(dir / "annotation.txt");
  if (!out) throw std::runtime_error("cannot write " + (dir / "annotation.txt").string());
  char box[160];
  std::snprintf(box, sizeof box, "%.17g %.17g %.17g %.17g", s.texture_box.x0, s.texture_box.y0, s.texture_box.x1,
                s.texture_box.y1);
  out << "family = " << family_name(s.family) << "\n"
      << "texture_box = " << box << "\n"
      << "clothing_from_texture = " << affine_str(s.clothing_from_texture) << "\n"
      << "person_from_texture = " << affine_str(s.person_from_texture) << "\n"
      << "truth_transform = " << affine_str(s.truth_transform()) << "\n"
      << "person = person.ppm\nclothing = clothing.ppm\nagnostic = agnostic.ppm\npose = pose.ppm\n"
      << "agnostic_mask = agnostic_mask.pgm\ngarment_mask = garment_mask.pgm\n";
}

SyntheticSample load_sample(const std::filesystem::path& dir) {
  std::ifstream in(dir / "annotation.txt");
  if (!in) throw std::runtime_error("missing annotation in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string v) {
      const auto a = v.find_first_not_of(" \t"), b = v.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const char* key : {"family", "texture_box", "clothing_from_texture", "person_from_texture", "person",
                          "clothing", "agnostic", "pose", "agnostic_mask", "garment_mask"}) {
    if (!kv.count(key)) throw std::runtime_error("annotation in " + dir.string() + " lacks '" + key + "'");
  }
  SyntheticSample s;
  s.family = parse_family(kv["family"]);
  std::istringstream bs(kv["texture_box"]);
  if (!(bs >> s.texture_box.x0 >> s.texture_box.y0 >> s.texture_box.x1 >> s.texture_box.y1)) {
    throw std::runtime_error("bad texture_box in " + dir.string());
  }
  s.clothing_from_texture = parse_affine(kv["clothing_from_texture"]);
  s.person_from_texture = parse_affine(kv["person_from_texture"]);
  s.person = read_ppm(dir / kv["person"]);
  s.clothing = read_ppm(dir / kv["clothing"]);
  s.agnostic = read_ppm(dir / kv["agnostic"]);
  s.pose = read_ppm(dir / kv["pose"]);
  s.agnostic_mask = read_pgm(dir / kv["agnostic_mask"]);
  s.garment_mask = read_pgm(dir / kv["garment_mask"]);
  return s;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                  const std::vector<std::uint64_t>& seeds) {
  std::filesystem::create_directories(dir);
  std::ofstream idx(dir / "index.csv");
  if (!idx) throw std::runtime_error("cannot write " + (dir / "index.csv").string());
  idx << "index,seed,family,directory,truth_a,truth_b,truth_c,truth_d,truth_e,truth_f\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu", i);
    save_sample(dir / name, samples[i]);
    const Affine2 t = samples[i].truth_transform();
    char row[512];
    std::snprintf(row, sizeof row, "%zu,%llu,%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", i,
                  static_cast<unsigned long long>(i < seeds.size() ? seeds[i] : 0), family_name(samples[i].family).c_str(),
                  name, t.a, t.b, t.c, t.d, t.e, t.f);
    idx << row;
  }
}

std::uint64_t sample_seed(std::uint64_t seed, int index) {
  return splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(index));
}

std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count, const DatasetConfig& cfg) {
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    Rng rng(sample_seed(seed, i));
    out.push_back(generate_sample(rng, cfg));
  }
  return out;
}

}  // namespace zca
