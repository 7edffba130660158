#include "latte/container.hpp"

#include <cstring>
#include <fstream>

#include "latte/error.hpp"

namespace latte {

namespace {
constexpr char kMagic[8] = {'L', 'A', 'T', 'T', 'E', 'T', 'C', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  write_u64(os, bits);
}
}  // namespace

void TensorContainer::save(const std::filesystem::path& path) const {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"dtype", "f64"}});
    offset += static_cast<std::uint64_t>(m.size()) * 8;
  }
  const std::string manifest = nlohmann::json{{"meta", meta}, {"tensors", index}}.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_u64(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& [name, m] : tensors) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) write_f64(os, m(r, c));
  }
  if (!os) throw IoError("short write to " + path.string());
}

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw IncompatibleCheckpoint(path.string() + " is not a tensor container");
  }
  const std::uint64_t len = read_u64(is);
  std::string manifest(len, '\0');
  is.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!is) throw IncompatibleCheckpoint(path.string() + ": truncated manifest");
  const auto doc = nlohmann::json::parse(manifest);

  TensorContainer out;
  out.meta = doc.value("meta", nlohmann::json::object());
  const auto payload_start = is.tellg();
  for (const auto& entry : doc.at("tensors")) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const std::uint64_t bits = read_u64(is);
        std::memcpy(&m(r, c), &bits, sizeof bits);
      }
    }
    if (!is) throw IncompatibleCheckpoint(path.string() + ": truncated tensor " + entry.at("name").get<std::string>());
    out.tensors.emplace(entry.at("name").get<std::string>(), std::move(m));
  }
  return out;
}

const Eigen::MatrixXd& TensorContainer::tensor(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IncompatibleCheckpoint("missing tensor '" + name + "'");
  return it->second;
}

}  // namespace latte
