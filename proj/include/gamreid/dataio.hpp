#pragma once

// Dataset indexing in the Market-1501 directory layout, PPM image I/O and a
// deterministic synthetic person-view generator.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "gamreid/image.hpp"
#include "gamreid/random.hpp"
#include "gamreid/tensor_io.hpp"

namespace gamreid {

namespace fs = std::filesystem;

struct MarketName {
  int identity;
  int camera;
};

/// "<id>_c<cam>s<seq>_..." with id possibly -1 (junk).
inline MarketName parse_market_filename(const std::string& name) {
  static const std::regex pattern(R"(^(-1|\d+)_c(\d+)s(\d+)_.*$)");
  const std::string base = fs::path(name).filename().string();
  std::smatch m;
  require(std::regex_match(base, m, pattern), ErrorKind::parse,
          "file name '" + base + "' does not follow <id>_c<cam>s<seq>_<frame>");
  return {std::stoi(m[1].str()), std::stoi(m[2].str())};
}

// ---------------------------------------------------------------- images

namespace detail {

inline std::string ppm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

inline std::size_t ppm_number(std::istream& is, const std::string& path) {
  const std::string tok = ppm_token(is);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  require(ec == std::errc() && ptr == tok.data() + tok.size() && !tok.empty(), ErrorKind::format,
          path + ": malformed PPM header");
  return v;
}

}  // namespace detail

/// Binary PPM (P6, 8-bit) as a [3, H, W] tensor scaled to [0, 1].
inline Tensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path.string());
  require(detail::ppm_token(is) == "P6", ErrorKind::format, path.string() + ": not a binary PPM (P6)");
  const std::size_t W = detail::ppm_number(is, path.string());
  const std::size_t H = detail::ppm_number(is, path.string());
  const std::size_t maxval = detail::ppm_number(is, path.string());
  require(W > 0 && H > 0 && W * H < (1u << 26), ErrorKind::format, path.string() + ": implausible PPM size");
  require(maxval > 0 && maxval < 256, ErrorKind::format, path.string() + ": only 8-bit PPM is supported");
  std::vector<unsigned char> raw(W * H * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  require(is.gcount() == static_cast<std::streamsize>(raw.size()), ErrorKind::format,
          path.string() + ": truncated PPM pixel data");
  std::vector<double> px(raw.size());
  for (std::size_t p = 0; p < W * H; ++p)
    for (std::size_t c = 0; c < 3; ++c) px[c * W * H + p] = raw[p * 3 + c] / static_cast<double>(maxval);
  return Tensor({3, H, W}, std::move(px));
}

/// Writes a [3, H, W] tensor in [0, 1] as 8-bit P6 (values clamped, rounded).
template <std::floating_point T>
void write_ppm(const fs::path& path, const BasicTensor<T>& img) {
  require(img.dim() == 3 && img.extent(0) == 3, ErrorKind::shape, "write_ppm expects [3,H,W], got " + shape_str(img.shape()));
  const std::size_t H = img.extent(1), W = img.extent(2);
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path.string() + " for writing");
  os << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> raw(W * H * 3);
  for (std::size_t p = 0; p < W * H; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(img[c * W * H + p]), 0.0, 1.0);
      raw[p * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + path.string());
}

inline bool is_image_file(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".gamt";
}

/// Loads a PPM or GAMT image and resizes it bilinearly to height x width.
inline Tensor load_image(const fs::path& path, std::size_t height, std::size_t width) {
  const auto ext = path.extension().string();
  Tensor img;
  if (ext == ".ppm") {
    img = read_ppm(path);
  } else if (ext == ".gamt") {
    img = load_tensor(path);
    require(img.dim() == 3 && img.extent(0) == 3, ErrorKind::format,
            path.string() + ": tensor image must be [3,H,W], got " + shape_str(img.shape()));
  } else {
    fail(ErrorKind::format, path.string() + ": unsupported image format (supported: .ppm binary P6, .gamt tensor)");
  }
  return resize_bilinear(img, height, width);
}

// ---------------------------------------------------------------- index

enum class Split { train, query, gallery };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  fail(ErrorKind::parse, "unknown split '" + s + "'");
}

/// Market-1501 directory for each split.
inline const char* split_directory(Split s) {
  switch (s) {
    case Split::train: return "bounding_box_train";
    case Split::query: return "query";
    case Split::gallery: return "bounding_box_test";
  }
  return "?";
}

struct DatasetEntry {
  std::string path;  // relative to the dataset root
  int identity;
  int camera;
  Split split;
  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetIndex {
  fs::path root;
  std::vector<DatasetEntry> entries;

  std::vector<DatasetEntry> split(Split s) const {
    std::vector<DatasetEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
};

inline constexpr const char* kIndexFile = "index.tsv";

/// `path<TAB>id<TAB>camera<TAB>split` per line.
inline void write_index(const DatasetIndex& index, const fs::path& file) {
  std::ofstream os(file);
  require(static_cast<bool>(os), ErrorKind::io, "cannot write " + file.string());
  for (const auto& e : index.entries)
    os << e.path << '\t' << e.identity << '\t' << e.camera << '\t' << to_string(e.split) << '\n';
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + file.string());
}

inline DatasetIndex read_index(const fs::path& file) {
  std::ifstream is(file);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + file.string());
  DatasetIndex index;
  index.root = file.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, '\t')) f.push_back(part);
    require(f.size() == 4, ErrorKind::parse,
            file.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
    try {
      index.entries.push_back({f[0], std::stoi(f[1]), std::stoi(f[2]), parse_split(f[3])});
    } catch (const std::logic_error&) {
      fail(ErrorKind::parse, file.string() + ":" + std::to_string(line_no) + ": bad identity or camera");
    }
  }
  return index;
}

/// Scans bounding_box_train / query / bounding_box_test under root. Files
/// are sorted by name within each split.
inline DatasetIndex scan_market(const fs::path& root) {
  require(fs::is_directory(root), ErrorKind::io, "dataset root " + root.string() + " is not a directory");
  DatasetIndex index;
  index.root = root;
  bool any_dir = false;
  for (Split s : {Split::train, Split::query, Split::gallery}) {
    const fs::path dir = root / split_directory(s);
    if (!fs::is_directory(dir)) continue;
    any_dir = true;
    std::vector<std::string> names;
    for (const auto& de : fs::directory_iterator(dir))
      if (de.is_regular_file() && is_image_file(de.path())) names.push_back(de.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& n : names) {
      const auto parsed = parse_market_filename(n);
      index.entries.push_back({(fs::path(split_directory(s)) / n).generic_string(), parsed.identity,
                               parsed.camera, s});
    }
  }
  require(any_dir, ErrorKind::io,
          root.string() + " has none of bounding_box_train/, query/, bounding_box_test/");
  return index;
}

/// Uses index.tsv when present, otherwise scans the directory layout.
inline DatasetIndex open_dataset(const fs::path& root) {
  if (fs::is_regular_file(root / kIndexFile)) {
    auto idx = read_index(root / kIndexFile);
    idx.root = root;
    return idx;
  }
  return scan_market(root);
}

// ---------------------------------------------------------------- synthetic

struct SynthSpec {
  std::size_t num_identities = 16;  // per split family (train and eval each)
  std::size_t views_per_identity = 24;
  std::size_t height = 32, width = 16;
  std::size_t num_cameras = 4;
  double noise = 0.03;
  std::uint64_t seed = 0;
  // Evaluation identities differ from training identities unless false.
  bool disjoint_eval = true;

  void validate() const {
    require(num_identities >= 2, ErrorKind::config, "synthetic set needs at least 2 identities");
    require(views_per_identity >= 2, ErrorKind::config, "synthetic set needs at least 2 views per identity");
    require(num_cameras >= 2, ErrorKind::config, "synthetic set needs at least 2 cameras");
    require(views_per_identity >= num_cameras, ErrorKind::config,
            "views_per_identity must cover every camera (>= num_cameras)");
    require(height >= 8 && width >= 4, ErrorKind::config, "synthetic images must be at least 8x4");
    require(noise >= 0 && std::isfinite(noise), ErrorKind::config, "noise must be non-negative");
  }
};

/// Person appearance: a palette colour for each of the body blocks.
struct Identity {
  std::vector<std::array<double, 3>> blocks;
};

namespace detail {

inline constexpr std::size_t kBodyBands = 4, kBodyColumns = 2;

// Eight well separated colours; an identity picks one per block.
inline const std::array<std::array<double, 3>, 8>& palette() {
  static const std::array<std::array<double, 3>, 8> p{{{0.85, 0.15, 0.15},
                                                      {0.15, 0.7, 0.2},
                                                      {0.2, 0.3, 0.9},
                                                      {0.9, 0.85, 0.2},
                                                      {0.8, 0.3, 0.8},
                                                      {0.2, 0.8, 0.85},
                                                      {0.95, 0.95, 0.95},
                                                      {0.1, 0.1, 0.1}}};
  return p;
}

struct CameraLook {
  std::array<double, 3> background;
  std::array<double, 3> tint;
  double brightness;
  long dy, dx;
};

}  // namespace detail

/// Distinct block-colour patterns for identities 0..count-1 of one family.
inline std::vector<Identity> make_identities(std::size_t count, std::uint64_t seed) {
  Rng rng(mix_seed({seed, 0x1d}));
  std::vector<Identity> out;
  std::vector<std::vector<std::size_t>> codes;
  while (out.size() < count) {
    std::vector<std::size_t> code(detail::kBodyBands * detail::kBodyColumns);
    // Left and right halves share a colour with probability 1/2 per band.
    for (std::size_t b = 0; b < detail::kBodyBands; ++b) {
      code[b * 2] = uniform_index(rng, detail::palette().size());
      code[b * 2 + 1] = bernoulli(rng, 0.5) ? code[b * 2] : uniform_index(rng, detail::palette().size());
    }
    if (std::find(codes.begin(), codes.end(), code) != codes.end()) continue;
    codes.push_back(code);
    Identity id;
    for (auto c : code) id.blocks.push_back(detail::palette()[c]);
    out.push_back(std::move(id));
  }
  return out;
}

/// Renders an identity's base pattern (no camera effects, centred).
inline Tensor render_identity(const Identity& id, std::size_t H, std::size_t W, const std::array<double, 3>& background,
                              long dy = 0, long dx = 0) {
  Tensor img = Tensor::zeros({3, H, W});
  const long top = static_cast<long>(H) / 8, bottom = static_cast<long>(H) - static_cast<long>(H) / 16;
  const long left = static_cast<long>(W) / 5, right = static_cast<long>(W) - static_cast<long>(W) / 5;
  const long head = top + (bottom - top) / 6;
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      const long sy = y - dy, sx = x - dx;
      std::array<double, 3> c = background;
      const long mid = (left + right) / 2, quarter = (right - left) / 4;
      if (sy >= top && sy < head && sx >= mid - quarter && sx < mid + quarter) {
        c = {0.85, 0.7, 0.6};  // head
      } else if (sy >= head && sy < bottom && sx >= left && sx < right) {
        const auto band = static_cast<std::size_t>((sy - head) * static_cast<long>(detail::kBodyBands) / (bottom - head));
        const std::size_t col = sx < mid ? 0 : 1;
        c = id.blocks[band * detail::kBodyColumns + col];
      }
      for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)] = c[ch];
    }
  return img;
}

struct SynthView {
  std::size_t family_index;  // identity within its family
  int identity;              // identity written to the file name
  int camera;                // 1-based
  std::size_t view;
  Split split;
};

/// The images of one synthetic set, in index order, without touching disk.
inline std::vector<std::pair<SynthView, Tensor>> render_synthetic(const SynthSpec& spec) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width;
  Rng cam_rng(mix_seed({spec.seed, 0xca}));
  std::vector<detail::CameraLook> cams;
  for (std::size_t c = 0; c < spec.num_cameras; ++c) {
    detail::CameraLook look;
    // Backgrounds are neutral grey; the draws stay so later camera draws
    // keep their stream position.
    for (auto& v : look.background) v = uniform(cam_rng, 0.15, 0.85);
    look.background = {0.5, 0.5, 0.5};
    for (auto& v : look.tint) v = uniform(cam_rng, 0.75, 1.25);
    look.brightness = uniform(cam_rng, -0.1, 0.1);
    look.dy = static_cast<long>(uniform_index(cam_rng, 5)) - 2;
    look.dx = static_cast<long>(uniform_index(cam_rng, 3)) - 1;
    cams.push_back(look);
  }
  const auto identities = make_identities(spec.num_identities * (spec.disjoint_eval ? 2 : 1), spec.seed);

  std::vector<std::pair<SynthView, Tensor>> out;
  auto render = [&](std::size_t family_index, int identity, std::size_t view, Split split) {
    const std::size_t cam = view % spec.num_cameras;
    Rng rng(mix_seed({spec.seed, static_cast<std::uint64_t>(identity), view, 0x5e}));
    Tensor img = render_identity(identities[family_index], H, W, cams[cam].background, cams[cam].dy, cams[cam].dx);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < H * W; ++p) {
        double v = img[ch * H * W + p] * cams[cam].tint[ch] + cams[cam].brightness;
        if (spec.noise > 0) v += spec.noise * standard_normal(rng);
        img[ch * H * W + p] = std::clamp(v, 0.0, 1.0);
      }
    out.push_back({{family_index, identity, static_cast<int>(cam + 1), view, split}, img});
  };
  for (std::size_t i = 0; i < spec.num_identities; ++i)
    for (std::size_t v = 0; v < spec.views_per_identity; ++v) render(i, static_cast<int>(i + 1), v, Split::train);
  const std::size_t eval_offset = spec.disjoint_eval ? spec.num_identities : 0;
  // One view per camera per identity goes to query; the rest to gallery.
  for (Split s : {Split::query, Split::gallery})
    for (std::size_t i = 0; i < spec.num_identities; ++i)
      for (std::size_t v = 0; v < spec.views_per_identity; ++v) {
        const bool is_query = v < spec.num_cameras;
        if (is_query != (s == Split::query)) continue;
        const std::size_t fi = eval_offset + i;
        // Eval views use a separate view range so non-disjoint sets still differ from train.
        render(fi, static_cast<int>(fi + 1), v + (spec.disjoint_eval ? 0 : spec.views_per_identity), s);
      }
  return out;
}

inline std::string synth_file_name(const SynthView& v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d_c%ds1_%06zu_00.ppm", v.identity, v.camera, v.view);
  return buf;
}

/// Writes the synthetic set in Market layout plus index.tsv. Refuses a
/// non-empty out_dir unless overwrite is set.
inline DatasetIndex generate_synthetic(const SynthSpec& spec, const fs::path& out_dir, bool overwrite = false) {
  spec.validate();
  if (fs::exists(out_dir)) {
    require(fs::is_directory(out_dir), ErrorKind::usage, out_dir.string() + " exists and is not a directory");
    if (!fs::is_empty(out_dir)) {
      require(overwrite, ErrorKind::usage, out_dir.string() + " is not empty (pass --overwrite to replace)");
      for (Split s : {Split::train, Split::query, Split::gallery}) fs::remove_all(out_dir / split_directory(s));
      fs::remove(out_dir / kIndexFile);
    }
  }
  for (Split s : {Split::train, Split::query, Split::gallery}) fs::create_directories(out_dir / split_directory(s));
  DatasetIndex index;
  index.root = out_dir;
  for (const auto& [view, img] : render_synthetic(spec)) {
    const std::string rel = (fs::path(split_directory(view.split)) / synth_file_name(view)).generic_string();
    write_ppm(out_dir / rel, img);
    index.entries.push_back({rel, view.identity, view.camera, view.split});
  }
  // Same ordering as a directory scan.
  std::stable_sort(index.entries.begin(), index.entries.end(), [](const DatasetEntry& a, const DatasetEntry& b) {
    if (a.split != b.split) return a.split < b.split;
    return a.path < b.path;
  });
  write_index(index, out_dir / kIndexFile);
  return index;
}

/// Loads every image of a split at the given size.
inline std::vector<Tensor> load_split(const DatasetIndex& index, Split s, std::size_t height, std::size_t width,
                                      std::vector<DatasetEntry>* entries = nullptr) {
  const auto list = index.split(s);
  std::vector<Tensor> out;
  out.reserve(list.size());
  for (const auto& e : list) out.push_back(load_image(index.root / e.path, height, width));
  if (entries) *entries = list;
  return out;
}

}  // namespace gamreid
