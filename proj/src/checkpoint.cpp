#include "slimsplit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>

#include "slimsplit/bytes.hpp"

namespace slimsplit {

namespace {

constexpr char kMagic[4] = {'S', 'L', 'I', 'M'};

void write_raw(std::ostream& out, const ByteWriter& w) {
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
}

std::vector<std::uint8_t> read_exact(std::istream& in, std::size_t n, const char* what) {
  std::vector<std::uint8_t> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  return buf;
}

}  // namespace

void write_checkpoint(std::ostream& out, const SplitModel& model) {
  const auto params = model.all_parameters();
  ByteWriter head;
  head.raw(kMagic, 4);
  head.u16(kCheckpointVersion);
  head.u8(static_cast<std::uint8_t>(model.config().ensemble_size));
  head.u64(model.spec_digest());
  head.u32(static_cast<std::uint32_t>(params.size()));
  write_raw(out, head);
  for (const Parameter* p : params) {
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.raw(p->name.data(), p->name.size());
    w.u8(static_cast<std::uint8_t>(p->value.rank()));
    for (Index d : p->value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (Index i = 0; i < p->value.size(); ++i) w.f64(p->value[i]);
    write_raw(out, w);
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

SplitModel read_checkpoint(std::istream& in) {
  const auto head_bytes = read_exact(in, 19, "header");
  ByteReader head(head_bytes);
  char magic[4];
  head.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint16_t version = head.u16();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig config;
  config.ensemble_size = head.u8();
  const std::uint64_t digest = head.u64();
  const std::uint32_t count = head.u32();

  SplitModel model(config);
  if (model.spec_digest() != digest) {
    throw CheckpointError("checkpoint architecture digest does not match this build");
  }
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : model.all_parameters()) by_name.emplace(p->name, p);
  if (count != by_name.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(by_name.size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len_bytes = read_exact(in, 2, "tensor name length");
    ByteReader len(len_bytes);
    const auto name_bytes = read_exact(in, len.u16(), "tensor name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unknown tensor '" + name + "' in checkpoint");
    Parameter& p = *it->second;
    const auto rank_bytes = read_exact(in, 1, "tensor rank");
    ByteReader rank_r(rank_bytes);
    const std::uint8_t rank = rank_r.u8();
    const auto dims_bytes = read_exact(in, 4u * rank, "tensor dims");
    ByteReader dims_r(dims_bytes);
    Shape shape(rank);
    for (auto& d : shape) d = dims_r.u32();
    if (shape != p.value.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + to_string(shape) +
                            ", model expects " + to_string(p.value.shape()));
    }
    const auto value_bytes = read_exact(in, 8u * static_cast<std::size_t>(numel(shape)), "tensor values");
    ByteReader values(value_bytes);
    for (Index i = 0; i < p.value.size(); ++i) p.value[i] = values.f64();
    p.zero_grad();
    by_name.erase(it);
  }
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const SplitModel& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
}

SplitModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace slimsplit
