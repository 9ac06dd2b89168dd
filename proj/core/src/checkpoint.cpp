// Copyright 2026 The DMSN Authors
// SPDX-License-Identifier: Apache-2.0

#include "dmsn/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include "dmsn/errors.hpp"

namespace dmsn {

namespace {
constexpr char kMagic[8] = {'D', 'M', 'S', 'N', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CorruptionError("truncated archive");
  return v;
}
}  // namespace

void save_archive(const std::string& path, const Archive& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  const std::string meta = a.metadata.dump();
  write_pod<uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod<uint64_t>(os, a.arrays.size());
  for (const auto& [name, t] : a.arrays) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.ndim()));
    for (int d : t.shape()) write_pod<int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path);
}

Archive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::string(magic, 8) != std::string(kMagic, 8))
    throw CorruptionError("bad archive magic: " + path);
  Archive a;
  const auto mlen = read_pod<uint64_t>(is);
  std::string meta(mlen, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw CorruptionError("truncated metadata");
  try {
    a.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("bad metadata json: ") + e.what());
  }
  const auto count = read_pod<uint64_t>(is);
  for (uint64_t i = 0; i < count; ++i) {
    const auto nlen = read_pod<uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto ndim = read_pod<uint32_t>(is);
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(read_pod<int32_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw CorruptionError("truncated array: " + name);
    a.arrays[name] = std::move(t);
  }
  return a;
}

}  // namespace dmsn
