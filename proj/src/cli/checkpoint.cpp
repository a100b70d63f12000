#include "etm/cli/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "etm/cli/config.hpp"
#include "json.hpp"

namespace etm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "bundle blobs are written in host byte order");

namespace {

constexpr char kMagic[4] = {'E', 'T', 'M', 'T'};
constexpr std::uint32_t kFloat32 = 1;
constexpr std::size_t kHeaderBytes = 16;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t offset) {
  T v;
  std::memcpy(&v, in.data() + offset, sizeof v);
  return v;
}

struct NamedTensor {
  std::string name;
  Var var;
};

std::vector<NamedTensor> segnet_tensors(const models::SegNet& net) {
  std::vector<NamedTensor> out;
  for (const auto& p : net.parameters()) out.push_back({"segnet/" + p.name(), p});
  return out;
}

std::vector<NamedTensor> tm_tensors(const models::TmPair& pair, int domain) {
  std::vector<NamedTensor> out;
  for (const auto& p : pair.parameters()) out.push_back({fmt::format("tm/{}/{}", domain, p.name()), p});
  return out;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot read {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
}

json segnet_config_json(const models::SegNetConfig& c) {
  return {{"num_classes", c.num_classes},
          {"encoder_channels", c.encoder_channels},
          {"head_channels", c.head_channels},
          {"head_dilation", c.head_dilation}};
}

json history_json(const metrics::RunHistory& h) {
  json entries = json::array();
  for (const auto& [key, v] : h.entries) entries.push_back({key.first, key.second, v});
  json source_only = json::array();
  for (const auto& [d, v] : h.source_only) source_only.push_back({d, v});
  return {{"method", h.method}, {"entries", entries}, {"source_only", source_only}};
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 8 * t.rank() + 4 * static_cast<std::size_t>(t.numel()));
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(out, kFloat32);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  put<std::uint32_t>(out, 0);
  for (auto d : t.shape()) put<std::int64_t>(out, d);
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
  out.insert(out.end(), p, p + 4 * t.numel());
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(fmt::format("{}: not a tensor blob", what));
  }
  if (get<std::uint32_t>(bytes, 4) != kFloat32) throw CheckpointError(fmt::format("{}: unsupported dtype", what));
  const auto rank = get<std::uint32_t>(bytes, 8);
  if (rank > 8 || bytes.size() < kHeaderBytes + 8 * rank) throw CheckpointError(fmt::format("{}: bad rank", what));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get<std::int64_t>(bytes, kHeaderBytes + 8 * i);
    if (d < 0) throw CheckpointError(fmt::format("{}: negative dimension", what));
    shape.push_back(d);
  }
  const std::size_t data_offset = kHeaderBytes + 8 * rank;
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (bytes.size() != data_offset + 4 * n) throw CheckpointError(fmt::format("{}: size does not match its shape", what));
  Tensor t(shape);
  std::memcpy(t.ptr(), bytes.data() + data_offset, 4 * n);
  return t;
}

void save_bundle(const fs::path& dir, const trainer::ContinualState& state, const trainer::TrainConfig& cfg,
                 const std::string& hash) {
  const fs::path staging = dir.parent_path() / (dir.filename().string() + ".tmp");
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging / "tensors", ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", staging.string(), ec.message()));

  std::vector<NamedTensor> tensors = segnet_tensors(state.segnet);
  json tm_domains = json::array();
  for (int d : state.tm_store.domains()) {
    tm_domains.push_back(d);
    for (auto& t : tm_tensors(state.tm_store.at(d), d)) tensors.push_back(std::move(t));
  }

  json index = json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto blob = encode_tensor(tensors[i].var.value());
    const std::string file = fmt::format("tensors/{:04d}.bin", i);
    write_file(staging / file, blob.data(), blob.size());
    index.push_back({{"name", tensors[i].name},
                     {"file", file},
                     {"shape", tensors[i].var.shape()},
                     {"crc32", crc32_of(blob.data(), blob.size())}});
  }

  const json manifest = {{"version", kBundleVersion},
                         {"config_hash", hash},
                         {"domains", state.history.domains},
                         {"completed", state.completed},
                         {"segnet", segnet_config_json(state.segnet.config())},
                         {"use_tm", cfg.ablation.use_tm},
                         {"tm_branches", {{"conv", cfg.ablation.branches.conv}, {"pool", cfg.ablation.branches.pool}}},
                         {"tm_domains", tm_domains},
                         {"history", history_json(state.history)},
                         {"tensors", index}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(staging / "manifest.json", text.data(), text.size());

  fs::remove_all(dir, ec);
  fs::rename(staging, dir, ec);
  if (ec) throw IoError(fmt::format("cannot move bundle into {}: {}", dir.string(), ec.message()));
}

Bundle load_bundle(const fs::path& dir) {
  const auto raw = read_file(dir / "manifest.json");
  json m;
  try {
    m = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw CheckpointError(fmt::format("{}: {}", (dir / "manifest.json").string(), e.what()));
  }
  try {
    const int version = m.at("version").get<int>();
    if (version != kBundleVersion) {
      throw CheckpointError(fmt::format("bundle version {} is not supported (expected {})", version, kBundleVersion));
    }
    Bundle b;
    b.config_hash = m.at("config_hash").get<std::string>();
    const auto& sc = m.at("segnet");
    b.segnet_config.num_classes = sc.at("num_classes").get<int>();
    b.segnet_config.encoder_channels = sc.at("encoder_channels").get<std::array<int, 4>>();
    b.segnet_config.head_channels = sc.at("head_channels").get<int>();
    b.segnet_config.head_dilation = sc.at("head_dilation").get<int>();
    b.use_tm = m.at("use_tm").get<bool>();
    b.branches = {m.at("tm_branches").at("conv").get<bool>(), m.at("tm_branches").at("pool").get<bool>()};

    auto& st = b.state;
    st.segnet = models::SegNet(b.segnet_config, 0);
    st.completed = m.at("completed").get<int>();
    auto& h = st.history;
    h.domains = m.at("domains").get<std::vector<std::string>>();
    h.config_hash = b.config_hash;
    h.method = m.at("history").at("method").get<std::string>();
    for (const auto& e : m.at("history").at("entries")) h.set(e[0].get<int>(), e[1].get<int>(), e[2].get<double>());
    for (const auto& e : m.at("history").at("source_only")) h.source_only[e[0].get<int>()] = e[1].get<double>();

    std::vector<std::pair<int, models::TmPair>> pairs;
    std::vector<NamedTensor> expected = segnet_tensors(st.segnet);
    for (const auto& d : m.at("tm_domains")) {
      const int domain = d.get<int>();
      models::TmPair pair{
          models::TargetMemory(st.segnet.mid_channels(), b.segnet_config.num_classes, domain, 0, b.branches,
                               fmt::format("tm{}.level1", domain)),
          models::TargetMemory(st.segnet.top_channels(), b.segnet_config.num_classes, domain, 0, b.branches,
                               fmt::format("tm{}.level2", domain))};
      for (auto& t : tm_tensors(pair, domain)) expected.push_back(std::move(t));
      pairs.emplace_back(domain, std::move(pair));
    }

    const auto& index = m.at("tensors");
    if (index.size() != expected.size()) {
      throw CheckpointError(fmt::format("bundle lists {} tensors, the model has {}", index.size(), expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& entry = index[i];
      const auto name = entry.at("name").get<std::string>();
      if (name != expected[i].name) {
        throw CheckpointError(fmt::format("tensor {} is '{}', expected '{}'", i, name, expected[i].name));
      }
      const auto file = entry.at("file").get<std::string>();
      const auto blob = read_file(dir / file);
      if (crc32_of(blob.data(), blob.size()) != entry.at("crc32").get<std::uint32_t>()) {
        throw CheckpointError(fmt::format("CRC mismatch in {} ({})", file, name));
      }
      Tensor t = decode_tensor(blob, file);
      if (t.shape() != expected[i].var.shape()) {
        throw CheckpointError(fmt::format("{} has shape {}, expected {}", name, shape_str(t.shape()),
                                          shape_str(expected[i].var.shape())));
      }
      expected[i].var.mutable_value() = std::move(t);
    }
    for (auto& [domain, pair] : pairs) st.tm_store.store(domain, std::move(pair));
    return b;
  } catch (const json::exception& e) {
    throw CheckpointError(fmt::format("malformed manifest in {}: {}", dir.string(), e.what()));
  }
}

}  // namespace etm::cli
