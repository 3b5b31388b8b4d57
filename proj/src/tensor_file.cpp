#include "arrowvid/tensor_file.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace arrowvid {

namespace {

struct Writer {
  std::vector<uint8_t> buf;
  void raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <class T>
  void num(T v) {
    raw(&v, sizeof(T));
  }
  void str(const std::string& s) {
    num<uint32_t>(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  std::vector<uint8_t> buf;
  size_t pos = 0;
  void raw(void* p, size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("tensor file: truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <class T>
  T num() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string str() {
    uint32_t n = num<uint32_t>();
    if (n > (1u << 20)) throw std::runtime_error("tensor file: absurd string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
};

void write_with_crc(const std::string& path, Writer& w) {
  uint32_t crc = static_cast<uint32_t>(crc32(0L, w.buf.data(), static_cast<uInt>(w.buf.size())));
  w.num<uint32_t>(crc);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

Reader read_with_crc(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  Reader r;
  r.buf.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  if (r.buf.size() < 8) throw std::runtime_error("tensor file too small: " + path);
  uint32_t stored;
  std::memcpy(&stored, r.buf.data() + r.buf.size() - 4, 4);
  uint32_t actual =
      static_cast<uint32_t>(crc32(0L, r.buf.data(), static_cast<uInt>(r.buf.size() - 4)));
  if (stored != actual) throw std::runtime_error("checksum mismatch in " + path);
  r.buf.resize(r.buf.size() - 4);
  return r;
}

void put_tensor_payload(Writer& w, const Tensor& t, Dtype dt) {
  w.num<uint8_t>(static_cast<uint8_t>(dt));
  w.num<uint32_t>(static_cast<uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) w.num<int64_t>(t.dim(i));
  switch (dt) {
    case Dtype::f64:
      w.raw(t.data(), sizeof(double) * static_cast<size_t>(t.numel()));
      break;
    case Dtype::f32:
      for (int64_t i = 0; i < t.numel(); ++i) w.num<float>(static_cast<float>(t[i]));
      break;
    case Dtype::u8:
      for (int64_t i = 0; i < t.numel(); ++i) {
        double v = std::round((t[i] + 1.0) * 127.5);
        w.num<uint8_t>(static_cast<uint8_t>(std::min(255.0, std::max(0.0, v))));
      }
      break;
  }
}

Tensor get_tensor_payload(Reader& r) {
  Dtype dt = static_cast<Dtype>(r.num<uint8_t>());
  uint32_t nd = r.num<uint32_t>();
  if (nd > 8) throw std::runtime_error("tensor file: rank too large");
  Shape s(nd);
  for (uint32_t i = 0; i < nd; ++i) s[i] = r.num<int64_t>();
  Tensor t(s);
  switch (dt) {
    case Dtype::f64:
      r.raw(t.data(), sizeof(double) * static_cast<size_t>(t.numel()));
      break;
    case Dtype::f32:
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(r.num<float>());
      break;
    case Dtype::u8:
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(r.num<uint8_t>()) / 127.5 - 1.0;
      break;
    default:
      throw std::runtime_error("tensor file: unknown dtype");
  }
  return t;
}

constexpr char kClipMagic[4] = {'A', 'V', 'T', 'C'};
constexpr char kListMagic[4] = {'A', 'V', 'T', 'L'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_clip(const std::string& path, const VideoClip& clip, Dtype dt) {
  Writer w;
  w.raw(kClipMagic, 4);
  w.num<uint32_t>(kVersion);
  w.num<double>(clip.fps);
  put_tensor_payload(w, clip.data, dt);
  write_with_crc(path, w);
}

VideoClip load_clip(const std::string& path) {
  Reader r = read_with_crc(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kClipMagic, 4) != 0) throw std::runtime_error("not a clip file: " + path);
  uint32_t ver = r.num<uint32_t>();
  if (ver != kVersion) throw std::runtime_error("unsupported clip version in " + path);
  double fps = r.num<double>();
  return VideoClip(get_tensor_payload(r), fps);
}

void save_tensor(const std::string& path, const Tensor& t, Dtype dt) {
  Writer w;
  w.raw(kClipMagic, 4);
  w.num<uint32_t>(kVersion);
  w.num<double>(0.0);
  put_tensor_payload(w, t, dt);
  write_with_crc(path, w);
}

Tensor load_tensor(const std::string& path) {
  Reader r = read_with_crc(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kClipMagic, 4) != 0) throw std::runtime_error("not a tensor file: " + path);
  r.num<uint32_t>();
  r.num<double>();
  return get_tensor_payload(r);
}

void save_named_tensors(const std::string& path, const NamedTensors& items) {
  Writer w;
  w.raw(kListMagic, 4);
  w.num<uint32_t>(kVersion);
  w.num<uint32_t>(static_cast<uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    w.str(name);
    put_tensor_payload(w, t, Dtype::f64);
  }
  write_with_crc(path, w);
}

NamedTensors load_named_tensors(const std::string& path) {
  Reader r = read_with_crc(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kListMagic, 4) != 0) throw std::runtime_error("not a tensor list: " + path);
  uint32_t ver = r.num<uint32_t>();
  if (ver != kVersion) throw std::runtime_error("unsupported list version in " + path);
  uint32_t count = r.num<uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    out.emplace_back(std::move(name), get_tensor_payload(r));
  }
  return out;
}

}  // namespace arrowvid
