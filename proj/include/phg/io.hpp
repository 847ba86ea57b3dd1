#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "phg/tensor.hpp"

namespace phg {

namespace fs = std::filesystem;

// PHGT record: "PHGT", u16 version, u8 dtype, u8 rank, u32 dims, payload; all
// little-endian. u8 tensors hold integers in [0,255].
enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline constexpr std::uint16_t kPhgtVersion = 1;

std::string encode_phgt(const Tensor& t, DType dtype);
// Throws DataError on malformed input and NumericError on non-finite f32 data.
Tensor decode_phgt(std::string_view bytes, DType* dtype = nullptr, const std::string& what = "tensor");

void write_phgt(const fs::path& path, const Tensor& t, DType dtype);
Tensor read_phgt(const fs::path& path, DType* dtype = nullptr);

void write_label_map(const fs::path& path, const LabelMap& m);
LabelMap read_label_map(const fs::path& path);
LabelMap to_label_map(const Tensor& rank2);
Tensor from_label_map(const LabelMap& m);

// Writes to a temporary sibling then renames, creating parent directories.
void atomic_write(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

// Records every path passed to read_file while enabled. Used to prove that a
// stage never touches ground-truth files.
class ReadAudit {
 public:
  static void start();
  static std::vector<std::string> stop();
};

// PHGC container: "PHGC", u16 version, u32 count, then per entry a u16 name
// length, the name bytes and one PHGT record.
struct ContainerEntry {
  std::string name;
  DType dtype = DType::f32;
  Tensor tensor;
};

void write_container(const fs::path& path, const std::vector<ContainerEntry>& entries);
std::vector<ContainerEntry> read_container(const fs::path& path);
Tensor string_tensor(std::string_view s);
std::string tensor_string(const Tensor& t);
const ContainerEntry& find_entry(const std::vector<ContainerEntry>& entries, const std::string& name);

// INI-style configuration. Keys are addressed as "section.key"; keys before any
// section header live at the top level.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const fs::path& path);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  // Adds or replaces a key, creating its section. text() is left unchanged.
  void set(const std::string& key, const std::string& value);

  // Section names in file order.
  std::vector<std::string> sections() const;
  // Keys of one section in file order.
  std::vector<std::string> keys(const std::string& section) const;

  const std::string& text() const { return text_; }

 private:
  std::string text_;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections_;
};

std::vector<std::string> split_list(const std::string& value);
std::string trim(std::string_view s);

// Runs fn(i) for i in [0,n) on up to `jobs` threads. Results must be written by
// index, so output never depends on the job count. The first exception thrown
// is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

// Dataset layout: <scene>/<modality>/NNNNNN.phgt
fs::path frame_path(const fs::path& scene, const std::string& modality, std::size_t frame);
std::vector<std::size_t> list_frames(const fs::path& scene, const std::string& modality);
// Scene directories under root (or root itself if it holds modality folders),
// sorted by name.
std::vector<fs::path> list_scenes(const fs::path& root, const std::string& probe_modality = "rgb");

}  // namespace phg
