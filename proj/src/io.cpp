#include "phg/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "phg/error.hpp"

namespace phg {

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > bytes.size()) throw DataError(what + ": truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

std::uint32_t float_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, sizeof u);
  return u;
}

float bits_float(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, sizeof f);
  return f;
}

std::string encode_record(const Tensor& t, DType dtype, const std::string& what) {
  std::string out = "PHGT";
  put_le<std::uint16_t>(out, kPhgtVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw DataError(what + ": rank too large");
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffULL) throw DataError(what + ": dimension too large");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  if (dtype == DType::f32) {
    ensure_finite(t, what.c_str());
    out.reserve(out.size() + t.size() * 4);
    for (float v : t.data()) put_le<std::uint32_t>(out, float_bits(v));
  } else {
    out.reserve(out.size() + t.size());
    for (float v : t.data()) {
      if (!(v >= 0.0f && v <= 255.0f) || v != std::floor(v))
        throw DataError(what + ": value " + std::to_string(v) + " does not fit u8");
      out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
    }
  }
  return out;
}

Tensor decode_record(std::string_view bytes, std::size_t& pos, DType* dtype_out, const std::string& what) {
  if (bytes.size() < pos + 4 || bytes.substr(pos, 4) != "PHGT") throw DataError(what + ": bad magic");
  pos += 4;
  const auto version = get_le<std::uint16_t>(bytes, pos, what);
  if (version != kPhgtVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  const auto code = get_le<std::uint8_t>(bytes, pos, what);
  if (code > 1) throw DataError(what + ": unknown dtype code " + std::to_string(code));
  const DType dtype = static_cast<DType>(code);
  const auto rank = get_le<std::uint8_t>(bytes, pos, what);
  Shape shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    shape.push_back(get_le<std::uint32_t>(bytes, pos, what));
    count *= shape.back();
  }
  const std::size_t width = dtype == DType::f32 ? 4 : 1;
  if (bytes.size() - pos < count * width) throw DataError(what + ": payload shorter than dims imply");
  std::vector<float> values(count);
  if (dtype == DType::f32) {
    for (std::size_t i = 0; i < count; ++i) values[i] = bits_float(get_le<std::uint32_t>(bytes, pos, what));
  } else {
    for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<unsigned char>(bytes[pos + i]);
    pos += count;
  }
  Tensor t(std::move(shape), std::move(values));
  ensure_finite(t, what.c_str());
  if (dtype_out) *dtype_out = dtype;
  return t;
}

std::mutex audit_mutex;
bool audit_on = false;
std::vector<std::string> audit_log;

}  // namespace

std::string encode_phgt(const Tensor& t, DType dtype) { return encode_record(t, dtype, "tensor"); }

Tensor decode_phgt(std::string_view bytes, DType* dtype, const std::string& what) {
  std::size_t pos = 0;
  Tensor t = decode_record(bytes, pos, dtype, what);
  if (pos != bytes.size()) throw DataError(what + ": trailing bytes after payload");
  return t;
}

void write_phgt(const fs::path& path, const Tensor& t, DType dtype) {
  atomic_write(path, encode_record(t, dtype, path.string()));
}

Tensor read_phgt(const fs::path& path, DType* dtype) { return decode_phgt(read_file(path), dtype, path.string()); }

LabelMap to_label_map(const Tensor& t) {
  if (t.rank() != 2) throw DataError("class map must be rank 2, got " + shape_str(t.shape()));
  LabelMap m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (t[i] < 0.0f || t[i] > 255.0f || t[i] != std::floor(t[i])) throw DataError("class map holds a non-index value");
    m.labels[i] = static_cast<std::uint8_t>(t[i]);
  }
  return m;
}

Tensor from_label_map(const LabelMap& m) {
  Tensor t({m.height, m.width});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = m.labels[i];
  return t;
}

void write_label_map(const fs::path& path, const LabelMap& m) { write_phgt(path, from_label_map(m), DType::u8); }

LabelMap read_label_map(const fs::path& path) {
  DType dt;
  const Tensor t = read_phgt(path, &dt);
  if (dt != DType::u8) throw DataError(path.string() + ": class map must be stored as u8");
  return to_label_map(t);
}

void atomic_write(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  static std::atomic<std::uint64_t> counter{0};
  fs::path tmp = path;
  tmp += fmt::format(".tmp{}", counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw DataError("failed writing " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  {
    std::lock_guard lock(audit_mutex);
    if (audit_on) audit_log.push_back(path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ReadAudit::start() {
  std::lock_guard lock(audit_mutex);
  audit_on = true;
  audit_log.clear();
}

std::vector<std::string> ReadAudit::stop() {
  std::lock_guard lock(audit_mutex);
  audit_on = false;
  return std::exchange(audit_log, {});
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

void write_container(const fs::path& path, const std::vector<ContainerEntry>& entries) {
  std::string out = "PHGC";
  put_le<std::uint16_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw DataError("container entry name too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    out += encode_record(e.tensor, e.dtype, path.string() + ":" + e.name);
  }
  atomic_write(path, out);
}

std::vector<ContainerEntry> read_container(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::string what = path.string();
  if (bytes.size() < 4 || bytes.compare(0, 4, "PHGC") != 0) throw DataError(what + ": bad container magic");
  std::size_t pos = 4;
  const auto version = get_le<std::uint16_t>(bytes, pos, what);
  if (version != 1) throw DataError(what + ": unsupported container version");
  const auto count = get_le<std::uint32_t>(bytes, pos, what);
  std::vector<ContainerEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(bytes, pos, what);
    if (pos + len > bytes.size()) throw DataError(what + ": truncated entry name");
    ContainerEntry e;
    e.name = bytes.substr(pos, len);
    pos += len;
    e.tensor = decode_record(bytes, pos, &e.dtype, what + ":" + e.name);
    entries.push_back(std::move(e));
  }
  if (pos != bytes.size()) throw DataError(what + ": trailing bytes");
  return entries;
}

Tensor string_tensor(std::string_view s) {
  Tensor t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

std::string tensor_string(const Tensor& t) {
  std::string s;
  for (float v : t.data()) s.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
  return s;
}

const ContainerEntry& find_entry(const std::vector<ContainerEntry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw DataError("container has no entry '" + name + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(value);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Config Config::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  Config c;
  c.text_ = text;
  c.sections_.emplace_back("", std::vector<std::pair<std::string, std::string>>{});
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      c.sections_.front().second.emplace_back(name, trim(node.data()));
    } else {
      std::vector<std::pair<std::string, std::string>> kv;
      for (const auto& [k, v] : node) kv.emplace_back(k, trim(v.data()));
      c.sections_.emplace_back(name, std::move(kv));
    }
  }
  return c;
}

Config Config::load(const fs::path& path) { return parse(read_file(path)); }

namespace {

std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.rfind('.');
  if (dot == std::string::npos) return {"", key};
  return {key.substr(0, dot), key.substr(dot + 1)};
}

}  // namespace

bool Config::has(const std::string& key) const {
  const auto [sec, k] = split_key(key);
  for (const auto& [name, kv] : sections_)
    if (name == sec)
      for (const auto& [kk, v] : kv)
        if (kk == k) return true;
  return false;
}

void Config::set(const std::string& key, const std::string& value) {
  const auto [sec, k] = split_key(key);
  for (auto& [name, kv] : sections_) {
    if (name != sec) continue;
    for (auto& [kk, v] : kv)
      if (kk == k) {
        v = value;
        return;
      }
    kv.emplace_back(k, value);
    return;
  }
  sections_.emplace_back(sec, std::vector<std::pair<std::string, std::string>>{{k, value}});
}

std::string Config::get(const std::string& key) const {
  const auto [sec, k] = split_key(key);
  for (const auto& [name, kv] : sections_)
    if (name == sec)
      for (const auto& [kk, v] : kv)
        if (kk == k) return v;
  throw DataError("config: missing key '" + key + "'");
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw DataError("config: '" + key + "' is not a number: " + v);
  }
}

long Config::get_int(const std::string& key, long fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw DataError("config: '" + key + "' is not an integer: " + v);
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw DataError("config: '" + key + "' is not a boolean: " + v);
}

std::vector<std::string> Config::get_list(const std::string& key) const { return split_list(get(key)); }

std::vector<std::string> Config::sections() const {
  std::vector<std::string> out;
  for (const auto& [name, kv] : sections_)
    if (!name.empty()) out.push_back(name);
  return out;
}

std::vector<std::string> Config::keys(const std::string& section) const {
  std::vector<std::string> out;
  for (const auto& [name, kv] : sections_)
    if (name == section)
      for (const auto& [k, v] : kv) out.push_back(k);
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t j = 0; j < jobs; ++j)
    workers.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

fs::path frame_path(const fs::path& scene, const std::string& modality, std::size_t frame) {
  return scene / modality / fmt::format("{:06d}.phgt", frame);
}

std::vector<std::size_t> list_frames(const fs::path& scene, const std::string& modality) {
  const fs::path dir = scene / modality;
  if (!fs::is_directory(dir)) throw DataError("missing modality directory " + dir.string());
  std::vector<std::size_t> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".phgt" || name.size() != 11) continue;
    const std::string stem = entry.path().stem().string();
    if (!std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
    frames.push_back(std::stoul(stem));
  }
  std::sort(frames.begin(), frames.end());
  return frames;
}

std::vector<fs::path> list_scenes(const fs::path& root, const std::string& probe_modality) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  if (fs::is_directory(root / probe_modality)) return {root};
  std::vector<fs::path> scenes;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::is_directory(entry.path() / probe_modality)) scenes.push_back(entry.path());
  std::sort(scenes.begin(), scenes.end());
  return scenes;
}

}  // namespace phg
