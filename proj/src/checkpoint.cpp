#include "zca/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace zca {

namespace {

template <typename U>
U swap_bytes(U v) {
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xffu));
  return out;
}

template <typename T, typename U>
void write_blob(const std::filesystem::path& path, const std::vector<T>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (T v : values) {
    U bits = std::bit_cast<U>(v);
    if constexpr (std::endian::native == std::endian::big) bits = swap_bytes(bits);
    char bytes[sizeof(U)];
    std::memcpy(bytes, &bits, sizeof(U));
    out.write(bytes, sizeof(U));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

template <typename T, typename U>
std::vector<T> read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() % sizeof(U) != 0) throw std::runtime_error(path.string() + ": size is not a multiple of the element width");
  std::vector<T> out(raw.size() / sizeof(U));
  for (std::size_t i = 0; i < out.size(); ++i) {
    U bits;
    std::memcpy(&bits, raw.data() + i * sizeof(U), sizeof(U));
    if constexpr (std::endian::native == std::endian::big) bits = swap_bytes(bits);
    out[i] = std::bit_cast<T>(bits);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& values) {
  write_blob<float, std::uint32_t>(path, values);
}
std::vector<float> read_f32_blob(const std::filesystem::path& path) { return read_blob<float, std::uint32_t>(path); }
void write_f64_blob(const std::filesystem::path& path, const std::vector<double>& values) {
  write_blob<double, std::uint64_t>(path, values);
}
std::vector<double> read_f64_blob(const std::filesystem::path& path) { return read_blob<double, std::uint64_t>(path); }

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest.txt");
  if (!m) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
  m << "format = zca-checkpoint 1\n"
    << "dtype = f32\n"
    << "endianness = little\n"
    << "blob = params.f32\n"
    << "model.base_width = " << ck.model.base_width << "\n"
    << "model.depth = " << ck.model.depth << "\n"
    << "model.heads = " << ck.model.heads << "\n"
    << "model.latent_h = " << ck.model.latent_h << "\n"
    << "model.latent_w = " << ck.model.latent_w << "\n"
    << "model.image_h = " << ck.model.image_h << "\n"
    << "model.image_w = " << ck.model.image_w << "\n"
    << "model.groups = " << ck.model.groups << "\n"
    << "model.embed_width = " << ck.model.embed_width << "\n"
    << "schedule.kind = linear\n"
    << "schedule.steps = " << ck.schedule.steps << "\n"
    << "schedule.beta_start = " << fmt(ck.beta_start) << "\n"
    << "schedule.beta_end = " << fmt(ck.beta_end) << "\n"
    << "schedule.blob = schedule.f64\n"
    << "schedule.dtype = f64\n"
    << "schedule.arrays = beta,alpha_bar\n";
  for (const auto& [k, v] : ck.meta) m << "meta." << k << " = " << v << "\n";
  std::vector<float> blob;
  blob.reserve(ck.params.element_count());
  for (const auto& p : ck.params.all()) {
    std::string shape;
    for (int d : p.value.shape()) shape += (shape.empty() ? "" : ",") + std::to_string(d);
    m << "param " << p.name << " group=" << p.group << " frozen=" << (p.frozen ? 1 : 0) << " shape=" << shape
      << " offset=" << blob.size() * sizeof(float) << " count=" << p.value.size() << "\n";
    blob.insert(blob.end(), p.value.storage().begin(), p.value.storage().end());
  }
  if (!m) throw std::runtime_error("short write to checkpoint manifest");
  write_f32_blob(dir / "params.f32", blob);
  std::vector<double> sched = ck.schedule.beta;
  sched.insert(sched.end(), ck.schedule.alpha_bar.begin(), ck.schedule.alpha_bar.end());
  write_f64_blob(dir / "schedule.f64", sched);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  struct Line {
    std::string name, group;
    bool frozen;
    Shape shape;
    std::size_t offset, count;
  };
  std::vector<Line> plines;
  std::string line;
  while (std::getline(m, line)) {
    if (line.rfind("param ", 0) == 0) {
      std::istringstream in(line.substr(6));
      Line p{};
      in >> p.name;
      std::string tok;
      while (in >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::runtime_error("bad manifest token " + tok);
        const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
        if (k == "group") p.group = v;
        else if (k == "frozen") p.frozen = v == "1";
        else if (k == "offset") p.offset = std::stoull(v);
        else if (k == "count") p.count = std::stoull(v);
        else if (k == "shape") {
          std::stringstream ss(v);
          std::string d;
          while (std::getline(ss, d, ',')) p.shape.push_back(std::stoi(d));
        }
      }
      plines.push_back(std::move(p));
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto need = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("checkpoint manifest lacks " + k);
    return it->second;
  };
  if (need("dtype") != "f32" || need("endianness") != "little") throw std::runtime_error("unsupported checkpoint encoding");
  Checkpoint ck;
  ck.model.base_width = std::stoi(need("model.base_width"));
  ck.model.depth = std::stoi(need("model.depth"));
  ck.model.heads = std::stoi(need("model.heads"));
  ck.model.latent_h = std::stoi(need("model.latent_h"));
  ck.model.latent_w = std::stoi(need("model.latent_w"));
  ck.model.image_h = std::stoi(need("model.image_h"));
  ck.model.image_w = std::stoi(need("model.image_w"));
  ck.model.groups = std::stoi(need("model.groups"));
  ck.model.embed_width = std::stoi(need("model.embed_width"));
  ck.beta_start = std::stod(need("schedule.beta_start"));
  ck.beta_end = std::stod(need("schedule.beta_end"));
  const int steps = std::stoi(need("schedule.steps"));
  for (const auto& [k, v] : kv) {
    if (k.rfind("meta.", 0) == 0) ck.meta[k.substr(5)] = v;
  }

  const std::vector<float> blob = read_f32_blob(dir / need("blob"));
  for (const auto& p : plines) {
    if (p.offset % sizeof(float) != 0 || p.offset / sizeof(float) + p.count > blob.size() || shape_numel(p.shape) != p.count) {
      throw std::runtime_error("checkpoint entry " + p.name + " is inconsistent with the blob");
    }
    const auto begin = blob.begin() + static_cast<std::ptrdiff_t>(p.offset / sizeof(float));
    ck.params.add(p.name, p.group, p.frozen, Tensor<float>(p.shape, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(p.count))));
  }

  const std::vector<double> sched = read_f64_blob(dir / need("schedule.blob"));
  if (sched.size() != 2 * static_cast<std::size_t>(steps)) throw std::runtime_error("schedule blob has the wrong length");
  ck.schedule.steps = steps;
  ck.schedule.beta.assign(sched.begin(), sched.begin() + steps);
  for (double b : ck.schedule.beta) ck.schedule.alpha.push_back(1.0 - b);
  ck.schedule.alpha_bar.assign(sched.begin() + steps, sched.end());
  validate_schedule(ck.schedule);
  return ck;
}

}  // namespace zca
