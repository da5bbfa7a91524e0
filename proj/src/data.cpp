#include "dihc/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>

namespace dihc {

namespace {

struct Ellipsoid {
  double cz, cy, cx;
  double az, ay, ax;
};

bool inside(const Ellipsoid& e, int z, int y, int x) {
  const double dz = (z - e.cz) / e.az;
  const double dy = (y - e.cy) / e.ay;
  const double dx = (x - e.cx) / e.ax;
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

}  // namespace

std::vector<Sample> generate_synthetic(int n_volumes, int shape, uint64_t seed,
                                       bool noise_free) {
  if (shape % 8 != 0) {
    throw std::invalid_argument("generate_synthetic: shape must be divisible by 8, got " +
                                std::to_string(shape));
  }
  std::vector<Sample> out;
  out.reserve(n_volumes);
  const int S = shape;
  const long vox = static_cast<long>(S) * S * S;

  for (int i = 0; i < n_volumes; ++i) {
    Rng rng = derive_rng(seed, {0x9e4, static_cast<uint64_t>(i)});
    Sample smp;
    smp.vol.shape = {S, S, S};
    smp.vol.v.resize(vox);
    smp.mask.shape = {S, S, S};
    smp.mask.v.assign(vox, 0);

    // ellipsoid geometry, redrawn until the foreground fraction lands in range
    std::vector<Ellipsoid> blobs;
    for (int attempt = 0; attempt < 64; ++attempt) {
      blobs.clear();
      const int count = 1 + rng.next_int(2);
      for (int b = 0; b < count; ++b) {
        Ellipsoid e;
        const double lo = 0.3 * S, hi = 0.7 * S;
        e.cz = rng.uniform(lo, hi);
        e.cy = rng.uniform(lo, hi);
        e.cx = rng.uniform(lo, hi);
        const double amin = 0.18 * S, amax = 0.30 * S;
        e.az = rng.uniform(amin, amax);
        e.ay = rng.uniform(amin, amax);
        e.ax = rng.uniform(amin, amax);
        blobs.push_back(e);
      }
      long fg = 0;
      for (int z = 0; z < S; ++z) {
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            for (const auto& e : blobs) {
              if (inside(e, z, y, x)) {
                ++fg;
                break;
              }
            }
          }
        }
      }
      const double frac = static_cast<double>(fg) / static_cast<double>(vox);
      if (frac >= 0.02 && frac <= 0.40) break;
    }

    const float background = rng.uniform(0.1f, 0.3f);
    const float contrast = rng.uniform(0.5f, 0.9f);

    // smooth low-frequency bias field
    struct Wave {
      double kz, ky, kx, phase, amp;
    };
    std::vector<Wave> waves;
    for (int wv = 0; wv < 3; ++wv) {
      Wave w;
      const double pi = std::numbers::pi;
      w.kz = rng.uniform(0.5f, 1.5f) * pi / S;
      w.ky = rng.uniform(0.5f, 1.5f) * pi / S;
      w.kx = rng.uniform(0.5f, 1.5f) * pi / S;
      w.phase = rng.uniform(0.f, 6.2831853f);
      w.amp = rng.uniform(0.05f, 0.12f);
      waves.push_back(w);
    }

    long idx = 0;
    for (int z = 0; z < S; ++z) {
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x, ++idx) {
          bool fg = false;
          for (const auto& e : blobs) {
            if (inside(e, z, y, x)) {
              fg = true;
              break;
            }
          }
          smp.mask.v[idx] = fg ? 1 : 0;
          float val = background + (fg ? contrast : 0.f);
          if (!noise_free) {
            double bias = 0.0;
            for (const auto& w : waves) {
              bias += w.amp * std::cos(w.kz * z + w.ky * y + w.kx * x + w.phase);
            }
            val += static_cast<float>(bias) + 0.1f * rng.normal();
          }
          smp.vol.v[idx] = val;
        }
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

DatasetSplit split_dataset(std::vector<Sample> data, double labelled_fraction, uint64_t seed) {
  if (!(labelled_fraction > 0.0) || labelled_fraction > 1.0) {
    throw std::invalid_argument("split: labelled_fraction must be in (0, 1]");
  }
  const int n = static_cast<int>(data.size());
  const int n_lab = static_cast<int>(std::ceil(labelled_fraction * n));
  if (n_lab == 0) throw std::invalid_argument("split: no labelled samples at this fraction");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng = derive_rng(seed, {0x59171});
  rng.shuffle(order);

  DatasetSplit out;
  for (int i = 0; i < n; ++i) {
    Sample& s = data[order[i]];
    if (i < n_lab) {
      out.labelled.push_back(std::move(s));
    } else {
      out.unlabelled.push_back(std::move(s.vol));
    }
  }
  const double frac = static_cast<double>(out.labelled.size()) /
                      static_cast<double>(n > 0 ? n : 1);
  if (frac > 0.5 && !out.unlabelled.empty()) {
    std::cerr << "[dihc] warning: labelled fraction " << frac
              << " exceeds 0.5; semi-supervised setting expects scarce labels\n";
  }
  return out;
}

namespace {

// axis permutation+flip transform shared by volume and mask
struct GridTransform {
  bool flip[3] = {false, false, false};
  int rot_axes[2] = {0, 1};  // 90-degree rotation plane
  int rot_quarter = 0;       // 0..3
};

template <typename T>
std::vector<T> apply_transform(const std::vector<T>& src, const Shape& shape,
                               const GridTransform& tf, Shape& out_shape) {
  const int D = shape[0], H = shape[1], W = shape[2];
  // rotation by 90 degrees in plane (a,b): repeated `rot_quarter` times
  // implemented by composing per-voxel index maps on the destination side
  auto src_at = [&](int z, int y, int x) {
    return src[(static_cast<long>(z) * H + y) * W + x];
  };
  // start with flips
  auto flipped = [&](int z, int y, int x) {
    if (tf.flip[0]) z = D - 1 - z;
    if (tf.flip[1]) y = H - 1 - y;
    if (tf.flip[2]) x = W - 1 - x;
    return src_at(z, y, x);
  };
  int dims[3] = {D, H, W};
  // One quarter-turn maps (u,v) -> (v, U-1-u) in the rotation plane; for
  // each output voxel we invert the rotation to find its source.
  const int a = tf.rot_axes[0], b = tf.rot_axes[1];
  const int quarters = tf.rot_quarter % 4;
  // output dims after rotation
  int out_dims[3] = {dims[0], dims[1], dims[2]};
  if (quarters % 2 == 1) std::swap(out_dims[a], out_dims[b]);
  out_shape = {out_dims[0], out_dims[1], out_dims[2]};

  std::vector<T> dst(src.size());
  long idx = 0;
  int c[3];
  for (c[0] = 0; c[0] < out_dims[0]; ++c[0]) {
    for (c[1] = 0; c[1] < out_dims[1]; ++c[1]) {
      for (c[2] = 0; c[2] < out_dims[2]; ++c[2], ++idx) {
        int s[3] = {c[0], c[1], c[2]};
        // invert the rotation quarter by quarter
        int cur_dims[3] = {out_dims[0], out_dims[1], out_dims[2]};
        for (int q = 0; q < quarters; ++q) {
          // inverse of (u,v)->(v, U-1-u) is (u,v)->(V-1-v, u)
          const int u = s[a], v = s[b];
          s[a] = cur_dims[b] - 1 - v;
          s[b] = u;
          std::swap(cur_dims[a], cur_dims[b]);
        }
        dst[idx] = flipped(s[0], s[1], s[2]);
      }
    }
  }
  return dst;
}

}  // namespace

AugmentDraw draw_augment(uint64_t seed) {
  Rng rng = derive_rng(seed, {0x49});
  AugmentDraw d;
  d.flip[0] = rng.next_bool();
  d.flip[1] = rng.next_bool();
  d.flip[2] = rng.next_bool();
  const int planes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  const int p = rng.next_int(3);
  d.rot_axes[0] = planes[p][0];
  d.rot_axes[1] = planes[p][1];
  d.rot_quarter = rng.next_int(4);
  return d;
}

std::pair<Volume, std::optional<BinaryMask>> augment(const Volume& v,
                                                     const std::optional<BinaryMask>& m,
                                                     uint64_t seed) {
  const AugmentDraw d = draw_augment(seed);
  GridTransform tf;
  tf.flip[0] = d.flip[0];
  tf.flip[1] = d.flip[1];
  tf.flip[2] = d.flip[2];
  tf.rot_axes[0] = d.rot_axes[0];
  tf.rot_axes[1] = d.rot_axes[1];
  tf.rot_quarter = d.rot_quarter;

  Volume out_v;
  out_v.v = apply_transform(v.v, v.shape, tf, out_v.shape);
  std::optional<BinaryMask> out_m;
  if (m.has_value()) {
    BinaryMask bm;
    bm.v = apply_transform(m->v, m->shape, tf, bm.shape);
    out_m = std::move(bm);
  }
  return {std::move(out_v), std::move(out_m)};
}

namespace {

// position q of an endlessly reshuffled index stream over n items
int stream_index(uint64_t seed, uint64_t tag, int n, long q) {
  const long epoch = q / n;
  const long slot = q % n;
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  Rng rng = derive_rng(seed, {tag, static_cast<uint64_t>(epoch)});
  rng.shuffle(perm);
  return perm[slot];
}

}  // namespace

Batch next_batch(const DatasetSplit& split, const BatchSpec& spec, int t) {
  if (split.labelled.empty()) {
    throw std::invalid_argument("next_batch: labelled set is empty");
  }
  const int L = spec.labelled_per_batch, U = spec.unlabelled_per_batch;
  if (L < 1 || U < 1) throw std::invalid_argument("next_batch: batch slots must be >= 1");

  const bool have_unlabelled = !split.unlabelled.empty();
  static bool warned = false;
  if (!have_unlabelled && !warned) {
    std::cerr << "[dihc] warning: unlabelled set empty, filling consistency slots from "
                 "labelled volumes\n";
    warned = true;
  }

  const Shape vs = split.labelled[0].vol.shape;
  const int D = vs[0], H = vs[1], W = vs[2];
  const long vox = static_cast<long>(D) * H * W;
  const int B = L + U;

  std::vector<float> x(static_cast<size_t>(B) * vox);
  std::vector<float> y(static_cast<size_t>(L) * vox);

  for (int slot = 0; slot < B; ++slot) {
    const Volume* vol = nullptr;
    const BinaryMask* mask = nullptr;
    if (slot < L) {
      const long q = static_cast<long>(t) * L + slot;
      const auto& s = split.labelled[stream_index(spec.seed, 0x1ab, static_cast<int>(split.labelled.size()), q)];
      vol = &s.vol;
      mask = &s.mask;
    } else {
      const long q = static_cast<long>(t) * U + (slot - L);
      if (have_unlabelled) {
        vol = &split.unlabelled[stream_index(spec.seed, 0x41a, static_cast<int>(split.unlabelled.size()), q)];
      } else {
        vol = &split.labelled[stream_index(spec.seed, 0x41a, static_cast<int>(split.labelled.size()), q)].vol;
      }
    }

    if (spec.augment) {
      std::optional<BinaryMask> m;
      if (mask) m = *mask;
      const uint64_t aug_seed =
          derive_rng(spec.seed, {0xa06, static_cast<uint64_t>(t), static_cast<uint64_t>(slot)})
              .next_u64();
      auto [av, am] = augment(*vol, m, aug_seed);
      std::copy(av.v.begin(), av.v.end(), x.begin() + static_cast<size_t>(slot) * vox);
      if (slot < L && am.has_value()) {
        for (long i = 0; i < vox; ++i) y[static_cast<size_t>(slot) * vox + i] = am->v[i];
      }
    } else {
      std::copy(vol->v.begin(), vol->v.end(), x.begin() + static_cast<size_t>(slot) * vox);
      if (slot < L) {
        for (long i = 0; i < vox; ++i) y[static_cast<size_t>(slot) * vox + i] = mask->v[i];
      }
    }
  }

  Batch batch;
  batch.x = Tensor::from_vector({B, 1, D, H, W}, std::move(x));
  batch.y = Tensor::from_vector({L, D, H, W}, std::move(y));
  for (int i = 0; i < L; ++i) batch.labelled_slots.push_back(i);
  return batch;
}

void zscore(Volume& v) {
  double s = 0.0, s2 = 0.0;
  for (float x : v.v) {
    s += x;
    s2 += static_cast<double>(x) * x;
  }
  const double n = static_cast<double>(v.v.size());
  const double mu = s / n;
  double var = s2 / n - mu * mu;
  if (var < 1e-12) var = 1e-12;
  const float istd = static_cast<float>(1.0 / std::sqrt(var));
  const float muf = static_cast<float>(mu);
  for (float& x : v.v) x = (x - muf) * istd;
}

// ---- DVOL I/O ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'V', 'O', 'L'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32(std::ifstream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DvolError(DvolError::Kind::kBadHeader, path + ": truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

struct DvolHeader {
  uint32_t dtype, D, H, W;
};

DvolHeader read_header(std::ifstream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DvolError(DvolError::Kind::kMagicMismatch, path + ": bad magic");
  }
  const uint32_t version = read_u32(is, path);
  if (version != kVersion) {
    throw DvolError(DvolError::Kind::kBadHeader,
                    path + ": unsupported version " + std::to_string(version));
  }
  DvolHeader h;
  h.dtype = read_u32(is, path);
  h.D = read_u32(is, path);
  h.H = read_u32(is, path);
  h.W = read_u32(is, path);
  if (h.dtype > 1) {
    throw DvolError(DvolError::Kind::kBadHeader, path + ": unknown dtype " + std::to_string(h.dtype));
  }
  constexpr uint64_t kMaxDim = 4096;
  if (h.D == 0 || h.H == 0 || h.W == 0 || h.D > kMaxDim || h.H > kMaxDim || h.W > kMaxDim) {
    throw DvolError(DvolError::Kind::kBadHeader, path + ": dimension overflow");
  }
  return h;
}

}  // namespace

void write_volume(const std::string& path, const Volume& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": cannot open for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, 0);
  write_u32(os, v.shape[0]);
  write_u32(os, v.shape[1]);
  write_u32(os, v.shape[2]);
  os.write(reinterpret_cast<const char*>(v.v.data()), v.v.size() * sizeof(float));
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": write failed");
}

void write_mask(const std::string& path, const BinaryMask& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": cannot open for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, 1);
  write_u32(os, m.shape[0]);
  write_u32(os, m.shape[1]);
  write_u32(os, m.shape[2]);
  os.write(reinterpret_cast<const char*>(m.v.data()), m.v.size());
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": write failed");
}

Volume read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DvolError(DvolError::Kind::kIo, path + ": cannot open");
  const DvolHeader h = read_header(is, path);
  if (h.dtype != 0) {
    throw DvolError(DvolError::Kind::kBadHeader, path + ": expected f32 volume, found mask");
  }
  Volume v;
  v.shape = {static_cast<int>(h.D), static_cast<int>(h.H), static_cast<int>(h.W)};
  v.v.resize(static_cast<size_t>(h.D) * h.H * h.W);
  is.read(reinterpret_cast<char*>(v.v.data()), v.v.size() * sizeof(float));
  if (static_cast<size_t>(is.gcount()) != v.v.size() * sizeof(float)) {
    throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": payload shorter than header dims");
  }
  char extra;
  if (is.read(&extra, 1)) {
    throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": payload longer than header dims");
  }
  return v;
}

BinaryMask read_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DvolError(DvolError::Kind::kIo, path + ": cannot open");
  const DvolHeader h = read_header(is, path);
  if (h.dtype != 1) {
    throw DvolError(DvolError::Kind::kBadHeader, path + ": expected u8 mask, found volume");
  }
  BinaryMask m;
  m.shape = {static_cast<int>(h.D), static_cast<int>(h.H), static_cast<int>(h.W)};
  m.v.resize(static_cast<size_t>(h.D) * h.H * h.W);
  is.read(reinterpret_cast<char*>(m.v.data()), m.v.size());
  if (static_cast<size_t>(is.gcount()) != m.v.size()) {
    throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": payload shorter than header dims");
  }
  char extra;
  if (is.read(&extra, 1)) {
    throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": payload longer than header dims");
  }
  return m;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": cannot open for writing");
  for (const auto& e : entries) {
    os << e.path << '\t' << (e.labelled ? "labelled" : "unlabelled") << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DvolError(DvolError::Kind::kIo, path + ": cannot open");
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DvolError(DvolError::Kind::kBadHeader, path + ": malformed manifest line: " + line);
    }
    ManifestEntry e;
    e.path = line.substr(0, tab);
    const std::string kind = line.substr(tab + 1);
    if (kind == "labelled") {
      e.labelled = true;
    } else if (kind == "unlabelled") {
      e.labelled = false;
    } else {
      throw DvolError(DvolError::Kind::kBadHeader, path + ": unknown kind: " + kind);
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace dihc
