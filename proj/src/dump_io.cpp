#include "kvsink/dump_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <system_error>

#include "kvsink/error.hpp"

namespace kvsink {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'S', 'D'};
constexpr std::size_t kFixedHeader = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t off, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[off + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

Error format_error(const std::string& msg, std::size_t offset, std::map<std::string, std::string> ctx = {}) {
  ctx["offset"] = std::to_string(offset);
  return Error(ErrorCode::Format, msg + " at byte " + std::to_string(offset), std::move(ctx));
}

void need(std::span<const std::uint8_t> b, std::size_t off, std::size_t len, const char* what) {
  if (b.size() < off + len) {
    throw format_error(std::string("truncated header: missing ") + what, b.size(),
                       {{"expected", std::to_string(off + len)}, {"actual", std::to_string(b.size())}});
  }
}

}  // namespace

std::vector<std::uint8_t> encode_dump(const DenseTensor& t, DType dtype) {
  if (t.ndim() == 0) throw Error(ErrorCode::Format, "cannot write a rank-0 tensor");
  for (std::size_t d : t.dims())
    if (d == 0) throw Error(ErrorCode::Format, "cannot write a tensor with a zero dimension");
  const std::size_t width = dtype == DType::F32 ? 4 : 8;
  std::vector<std::uint8_t> out;
  out.reserve(kFixedHeader + 8 * t.ndim() + width * t.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kDumpVersion);
  put_u32(out, static_cast<std::uint32_t>(dtype));
  put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t d : t.dims()) put_u64(out, d);
  for (double v : t.data()) {
    if (dtype == DType::F32) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

DenseTensor decode_dump(std::span<const std::uint8_t> b) {
  need(b, 0, 4, "magic");
  if (std::memcmp(b.data(), kMagic, 4) != 0) throw format_error("bad magic", 0);
  need(b, 4, 4, "version");
  const auto version = static_cast<std::uint32_t>(get_le(b, 4, 4));
  if (version != kDumpVersion) {
    throw format_error("unsupported version", 4, {{"version", std::to_string(version)}});
  }
  need(b, 8, 4, "dtype");
  const auto code = static_cast<std::uint32_t>(get_le(b, 8, 4));
  if (code != 1 && code != 2) throw format_error("unknown dtype code", 8, {{"dtype", std::to_string(code)}});
  const std::size_t width = code == 1 ? 4 : 8;
  need(b, 12, 4, "ndim");
  const auto ndim = static_cast<std::uint32_t>(get_le(b, 12, 4));
  if (ndim == 0) throw format_error("ndim must be positive", 12);
  need(b, kFixedHeader, 8ull * ndim, "dims");
  std::vector<std::size_t> dims(ndim);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const std::size_t off = kFixedHeader + 8ull * i;
    const std::uint64_t d = get_le(b, off, 8);
    if (d == 0) throw format_error("zero dimension", off, {{"axis", std::to_string(i)}});
    if (count > (std::uint64_t{1} << 48) / d) throw format_error("dimensions overflow", off);
    count *= d;
    dims[i] = static_cast<std::size_t>(d);
  }
  const std::size_t payload_off = kFixedHeader + 8ull * ndim;
  const std::uint64_t expected = count * width;
  const std::uint64_t actual = b.size() - payload_off;
  if (actual != expected) {
    throw format_error(actual < expected ? "truncated payload" : "trailing bytes after payload", payload_off,
                       {{"expected", std::to_string(expected)}, {"actual", std::to_string(actual)}});
  }
  std::vector<double> data(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t off = payload_off + i * width;
    data[i] = width == 4 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(b, off, 4))))
                         : std::bit_cast<double>(get_le(b, off, 8));
  }
  return DenseTensor(std::move(dims), std::move(data));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::random_device rd;
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open file for writing", {{"path", tmp.string()}});
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed", {{"path", tmp.string()}});
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error(ErrorCode::Io, "cannot rename temporary file", {{"path", path.string()}});
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open file", {{"path", path.string()}});
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open file", {{"path", path.string()}});
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_dump(const std::filesystem::path& path, const DenseTensor& t, DType dtype) {
  write_file_atomic(path, encode_dump(t, dtype));
}

DenseTensor read_dump(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  try {
    return decode_dump(bytes);
  } catch (Error& e) {
    auto ctx = e.context();
    ctx["path"] = path.string();
    throw Error(e.code(), e.what(), std::move(ctx));
  }
}

}  // namespace kvsink
