#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "megabyte/core.hpp"

namespace megabyte {

using ByteSequence = std::vector<std::uint8_t>;

struct Document {
  std::string id;
  ByteSequence bytes;
};

inline ByteSequence read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return ByteSequence(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

// One Document per regular file, raw bytes, no decoding. Directories are
// walked recursively in lexicographic path order.
inline std::vector<Document> load_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::exists(path, ec)) throw DataError("corpus path does not exist: " + path.string());
  std::vector<fs::path> files;
  if (fs::is_directory(path, ec)) {
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw DataError("empty corpus: no files under " + path.string());
  std::vector<Document> docs;
  docs.reserve(files.size());
  for (const auto& f : files) {
    Document doc{fs::is_directory(path) ? fs::relative(f, path).generic_string() : f.filename().string(),
                 read_file_bytes(f)};
    if (doc.bytes.empty()) throw DataError("empty document: " + f.string());
    docs.push_back(std::move(doc));
  }
  return docs;
}

// A training/eval window: `length` real bytes of document `document` starting
// at `offset`; the remaining context_length - length slots are padding.
struct Window {
  std::size_t document = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Windows of T bytes every `stride` bytes, never spanning documents. A
// document tail that does not fill a window gets one padded window.
inline std::vector<Window> make_windows(const std::vector<Document>& docs, std::size_t context_length,
                                        std::size_t stride) {
  if (context_length == 0) throw ConfigError("context length must be >= 1");
  if (stride == 0 || stride > context_length) throw ConfigError("window stride must be in [1, context length]");
  std::vector<Window> out;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const std::size_t len = docs[d].bytes.size();
    for (std::size_t o = 0;; o += stride) {
      out.push_back({d, o, std::min(context_length, len - o)});
      if (o + context_length >= len) break;
    }
  }
  return out;
}

// B×T inputs with a per-position loss mask (1 real byte, 0 pad).
struct Batch {
  std::size_t rows = 0;
  std::size_t context_length = 0;
  ByteSequence inputs;
  std::vector<real> mask;
  std::vector<Window> provenance;

  std::span<const std::uint8_t> row(std::size_t i) const {
    return std::span<const std::uint8_t>(inputs).subspan(i * context_length, context_length);
  }
};

inline Batch make_batch(const std::vector<Document>& docs, std::span<const Window> windows, std::size_t context_length) {
  Batch b;
  b.rows = windows.size();
  b.context_length = context_length;
  b.inputs.assign(b.rows * context_length, 0);
  b.mask.assign(b.rows * context_length, real(0));
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Window& w = windows[i];
    const auto& src = docs.at(w.document).bytes;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(w.offset), w.length, b.inputs.begin() + i * context_length);
    std::fill_n(b.mask.begin() + i * context_length, w.length, real(1));
    b.provenance.push_back(w);
  }
  return b;
}

// Groups windows in the given order into batches of at most batch_size rows.
inline std::vector<Batch> make_batches(const std::vector<Document>& docs, std::span<const Window> windows,
                                       std::size_t context_length, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < windows.size(); i += batch_size) {
    out.push_back(make_batch(docs, windows.subspan(i, std::min(batch_size, windows.size() - i)), context_length));
  }
  return out;
}

// Whitespace-delimited token count.
inline std::size_t count_words(std::span<const std::uint8_t> bytes) {
  std::size_t words = 0;
  bool in_word = false;
  for (auto b : bytes) {
    const bool space = std::isspace(static_cast<unsigned char>(b)) != 0;
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

// ---------------------------------------------------------------------------
// Images

struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  ByteSequence pixels;  // row-major, 3 channel bytes per pixel

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[3 * (y * width + x) + c]; }
  bool operator==(const ImageGrid&) const = default;
};

inline void check_image(const ImageGrid& img) {
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width * 3)
    throw DataError("image payload does not match " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x3");
}

// Pixels row by row, 3 channel bytes each.
inline ByteSequence raster_scan(const ImageGrid& img) {
  check_image(img);
  return img.pixels;
}

inline ImageGrid raster_unscan(std::span<const std::uint8_t> bytes, std::size_t height, std::size_t width) {
  ImageGrid img{height, width, ByteSequence(bytes.begin(), bytes.end())};
  check_image(img);
  return img;
}

// Side length p of the p×p pixel tile holding P = 3p² bytes.
inline std::size_t patch_side(std::size_t patch_size) {
  if (patch_size == 0 || patch_size % 3 != 0) throw DataError("patch size must be 3 * p^2");
  const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patch_size / 3))));
  if (p == 0 || 3 * p * p != patch_size) throw DataError("patch size must be 3 * p^2, got " + std::to_string(patch_size));
  return p;
}

namespace detail {

// Source offset in the raster payload of the i-th byte of the patch scan.
template <class Fn>
void for_each_patch_byte(std::size_t height, std::size_t width, std::size_t p, Fn&& fn) {
  if (height % p != 0 || width % p != 0)
    throw DataError("image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible into " +
                    std::to_string(p) + "x" + std::to_string(p) + " tiles");
  std::size_t i = 0;
  for (std::size_t ty = 0; ty < height / p; ++ty)
    for (std::size_t tx = 0; tx < width / p; ++tx)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c) fn(i++, 3 * ((ty * p + y) * width + tx * p + x) + c);
}

}  // namespace detail

// Raster order over p×p pixel tiles, raster order inside each tile.
inline ByteSequence patch_scan(const ImageGrid& img, std::size_t patch_size) {
  check_image(img);
  const std::size_t p = patch_side(patch_size);
  ByteSequence out(img.pixels.size());
  detail::for_each_patch_byte(img.height, img.width, p, [&](std::size_t i, std::size_t src) { out[i] = img.pixels[src]; });
  return out;
}

inline ImageGrid patch_unscan(std::span<const std::uint8_t> bytes, std::size_t height, std::size_t width,
                              std::size_t patch_size) {
  ImageGrid img{height, width, ByteSequence(bytes.size())};
  check_image(img);
  const std::size_t p = patch_side(patch_size);
  detail::for_each_patch_byte(height, width, p, [&](std::size_t i, std::size_t dst) { img.pixels[dst] = bytes[i]; });
  return img;
}

// Binary PPM ("P6", maxval 255). Header tokens may be separated by any
// whitespace and '#' comments run to end of line.
inline ImageGrid parse_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError(std::string("ppm: missing ") + field);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1u << 30)) throw FormatError(std::string("ppm: ") + field + " too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: bad magic (expected P6)");
  pos = 2;
  const std::size_t width = read_number("width");
  const std::size_t height = read_number("height");
  const std::size_t maxval = read_number("maxval");
  if (maxval != 255) throw FormatError("ppm: maxval must be 255, got " + std::to_string(maxval));
  if (width == 0 || height == 0) throw FormatError("ppm: zero image dimension");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: truncated header");
  ++pos;
  const std::size_t need = width * height * 3;
  if (bytes.size() - pos < need) throw FormatError("ppm: truncated payload");
  return ImageGrid{height, width, ByteSequence(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                               bytes.begin() + static_cast<std::ptrdiff_t>(pos + need))};
}

inline ByteSequence write_ppm(const ImageGrid& img) {
  check_image(img);
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  ByteSequence out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

}  // namespace megabyte
