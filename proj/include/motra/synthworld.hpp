#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "motra/bundle.hpp"
#include "motra/renderer.hpp"
#include "motra/rng.hpp"
#include "motra/tensor.hpp"

namespace motra::world {

// 16-joint skeleton. Parts are capsules between joints; legs are single
// straight capsules, so knees sit at the hip-ankle midpoint by construction.
enum Joint {
  kPelvis = 0, kSpine, kNeck, kHeadTop,
  kLSho, kLElb, kLWri, kRSho, kRElb, kRWri,
  kLHip, kLKnee, kLAnk, kRHip, kRKnee, kRAnk,
  kNumJoints
};

// 8 base body parts; n_parts must be a multiple of 8 and each base capsule is
// subdivided into n_parts/8 collinear segments (full-scale n=24 -> 3 each).
enum BasePart {
  kHead = 0, kTorso, kLUArm, kLLArm, kRUArm, kRLArm, kLLeg, kRLeg,
  kNumBaseParts
};

// capsule endpoints per base part
inline constexpr int kPartJointA[8] = {kNeck, kPelvis, kLSho, kLElb, kRSho, kRElb, kLHip, kRHip};
inline constexpr int kPartJointB[8] = {kHeadTop, kNeck, kLElb, kLWri, kRElb, kRWri, kLAnk, kRAnk};

// painter's order, front to back
inline constexpr int kDrawPriority[8] = {kLLArm, kRLArm, kLUArm, kRUArm, kHead, kTorso, kLLeg, kRLeg};

// 17 bones + 1 root channel in the stickman raster
inline constexpr int kNumBones = 17;
inline constexpr int kBoneA[kNumBones] = {kPelvis, kSpine, kNeck, kNeck, kNeck, kLSho, kLElb,
                                          kRSho,   kRElb,  kPelvis, kPelvis, kLHip, kLKnee,
                                          kRHip,   kRKnee, kLSho, kLHip};
inline constexpr int kBoneB[kNumBones] = {kSpine, kNeck, kHeadTop, kLSho, kRSho, kLElb, kLWri,
                                          kRElb,  kRWri, kLHip,   kRHip,  kLKnee, kLAnk,
                                          kRKnee, kRAnk, kRSho, kRHip};
inline constexpr int kStickmanChannels = kNumBones + 1;

struct WorldConfig {
  int n_parts = 8;
  int image_size = 64;
  int atlas_size = 32;
  int persons_train = 6;
  int persons_test = 2;
  int frames_per_person = 200;
  double stick_width = 1.5;
  double max_angle_delta = 0.15;
  uint64_t seed = 0;

  void validate() const {
    if (n_parts < 8 || n_parts % 8 != 0)
      throw std::invalid_argument("world.n_parts must be a positive multiple of 8");
    if (image_size < 16) throw std::invalid_argument("world.image_size too small");
    if (atlas_size < 4) throw std::invalid_argument("world.atlas_size too small");
    if (frames_per_person < 1) throw std::invalid_argument("world.frames_per_person >= 1");
  }
  int segments_per_part() const { return n_parts / 8; }
};

struct TexDesc {
  int type = 0;  // 0 solid, 1 stripes along u, 2 checker
  std::array<double, 3> c1{}, c2{};
  int period = 8;

  bool operator==(const TexDesc&) const = default;
};

struct PersonSpec {
  std::string person_id;
  uint64_t seed = 0;
  // capsule rest lengths / widths, in pixels
  double torso_len = 18, head_len = 9, uarm_len = 8, larm_len = 8, leg_len = 20;
  double torso_w = 12, head_w = 8, arm_w = 4, leg_w = 5;
  double shoulder_off = 5, hip_off = 3.5;
  std::array<TexDesc, 8> part_tex{};
  // smooth per-channel background: b0 + b1*x + b2*y + b3*sin(2pi(f1*x+f2*y)+ph)
  std::array<std::array<double, 6>, 3> bg{};

  bool operator==(const PersonSpec&) const = default;
};

struct PoseSample {
  // angles: torso, head, l_uarm, l_larm, r_uarm, r_larm, l_leg, r_leg
  std::array<double, 8> joint_angles{};
  double root_x = 0, root_y = 0;
  Tensor<float> keypoints;  // (16,2), clamped into image bounds
};

struct GTFrame {
  Tensor<float> image;      // (3,H,W)
  Tensor<float> mask;       // (1,H,W)
  Tensor<float> scores;     // (n+1,H,W) one-hot
  Tensor<float> uv;         // (2n,H,W)
  Tensor<float> stickman;   // (18,H,W)
  Tensor<float> keypoints;  // (16,2)
};

struct PartialTexture {
  Tensor<float> atlas;  // (n,3,Ht,Wt)
  Tensor<float> sigma;  // (n,Ht,Wt) in {0,1}
};

namespace detail {
inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  double r = std::abs(h * 6.0 - 3.0) - 1.0;
  double g = 2.0 - std::abs(h * 6.0 - 2.0);
  double b = 2.0 - std::abs(h * 6.0 - 4.0);
  auto cl = [](double x) { return std::min(std::max(x, 0.0), 1.0); };
  return {v * (1.0 + s * (cl(r) - 1.0)), v * (1.0 + s * (cl(g) - 1.0)),
          v * (1.0 + s * (cl(b) - 1.0))};
}
}  // namespace detail

// Deterministic person synthesis; distinct seeds vary limb geometry by up to
// +-25% and pick well-separated part palettes (golden-ratio hue walk).
inline PersonSpec make_person(uint64_t seed, const WorldConfig& cfg, const std::string& id = "") {
  cfg.validate();
  PersonSpec p;
  p.seed = seed;
  p.person_id = id.empty() ? ("person_" + std::to_string(seed)) : id;
  Rng rng(Rng::mix(seed ^ 0x5eed0f00ULL));
  double s = cfg.image_size / 64.0;
  auto vary = [&](double base) { return base * s * rng.uniform(0.75, 1.25); };
  p.torso_len = vary(18);
  p.head_len = vary(9);
  p.uarm_len = vary(8);
  p.larm_len = vary(8);
  p.leg_len = vary(20);
  p.torso_w = vary(12);
  p.head_w = vary(8);
  p.arm_w = std::max(3.0 * s, vary(4));
  p.leg_w = std::max(3.0 * s, vary(5));
  p.shoulder_off = vary(5);
  p.hip_off = vary(3.5);

  double hue0 = Rng::mix(seed ^ 0xc0105eedULL) % 1000 / 1000.0;
  for (int k = 0; k < 8; ++k) {
    TexDesc& t = p.part_tex[k];
    t.type = rng.uniform_int(3);
    double h1 = hue0 + 0.61803398875 * k;
    t.c1 = detail::hsv_to_rgb(h1, 0.7 + 0.2 * rng.uniform(), 0.55 + 0.4 * rng.uniform());
    t.c2 = detail::hsv_to_rgb(h1 + 0.33, 0.6 + 0.3 * rng.uniform(), 0.35 + 0.3 * rng.uniform());
    t.period = std::max(2, cfg.atlas_size / 4);
  }
  for (int c = 0; c < 3; ++c) {
    p.bg[c] = {0.35 + 0.3 * rng.uniform(), 0.15 * rng.uniform(-1, 1), 0.15 * rng.uniform(-1, 1),
               0.08 * rng.uniform(), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
  }
  return p;
}

inline Tensor<float> make_background(const PersonSpec& p, int size) {
  Tensor<float> bgim({3, size, size});
  for (int c = 0; c < 3; ++c) {
    const auto& b = p.bg[c];
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double xn = static_cast<double>(x) / size, yn = static_cast<double>(y) / size;
        double v = b[0] + b[1] * xn + b[2] * yn +
                   b[3] * std::sin(2.0 * 3.14159265358979 * (b[4] * xn + b[5] * yn));
        bgim.at3(c, y, x) = static_cast<float>(std::min(std::max(v, 0.0), 1.0));
      }
  }
  return bgim;
}

// Ground-truth texture atlas implied by the person's procedural descriptors.
inline Tensor<float> make_gt_atlas(const PersonSpec& p, const WorldConfig& cfg) {
  int n = cfg.n_parts, nt = cfg.atlas_size, nseg = cfg.segments_per_part();
  Tensor<float> atlas({n, 3, nt, nt});
  for (int k = 0; k < n; ++k) {
    const TexDesc& t = p.part_tex[k / nseg];
    int seg = k % nseg;
    for (int v = 0; v < nt; ++v)
      for (int u = 0; u < nt; ++u) {
        // segment k covers the sub-range [seg,seg+1)/nseg of the base capsule,
        // so pattern coordinates continue seamlessly across segments
        double ug = (seg + static_cast<double>(u) / nt) / nseg * nt;
        bool flip = false;
        if (t.type == 1) flip = (static_cast<int>(ug / t.period)) % 2 == 1;
        if (t.type == 2)
          flip = ((static_cast<int>(ug / t.period)) + (v / t.period)) % 2 == 1;
        const auto& c = flip ? t.c2 : t.c1;
        for (int ch = 0; ch < 3; ++ch)
          atlas[(static_cast<int64_t>(k) * 3 + ch) * nt * nt + v * nt + u] =
              static_cast<float>(c[ch]);
      }
  }
  return atlas;
}

struct Pt {
  double x = 0, y = 0;
};

// Forward kinematics; arm/leg angles are measured from the downward vertical,
// relative to the torso orientation.
inline std::array<Pt, kNumJoints> forward_kinematics(const PersonSpec& p, const PoseSample& pose) {
  std::array<Pt, kNumJoints> j{};
  const auto& a = pose.joint_angles;
  auto dir = [](double ang) { return Pt{std::sin(ang), std::cos(ang)}; };  // 0 = down, y down
  double th_t = a[0];
  Pt up{-std::sin(th_t), -std::cos(th_t)};
  Pt perp{std::cos(th_t), -std::sin(th_t)};  // person's left in image space

  j[kPelvis] = {pose.root_x, pose.root_y};
  j[kNeck] = {j[kPelvis].x + up.x * p.torso_len, j[kPelvis].y + up.y * p.torso_len};
  j[kSpine] = {(j[kPelvis].x + j[kNeck].x) / 2, (j[kPelvis].y + j[kNeck].y) / 2};
  Pt hd{-std::sin(th_t + a[1]), -std::cos(th_t + a[1])};
  j[kHeadTop] = {j[kNeck].x + hd.x * p.head_len, j[kNeck].y + hd.y * p.head_len};

  j[kLSho] = {j[kNeck].x + perp.x * p.shoulder_off, j[kNeck].y + perp.y * p.shoulder_off};
  j[kRSho] = {j[kNeck].x - perp.x * p.shoulder_off, j[kNeck].y - perp.y * p.shoulder_off};
  Pt lua = dir(th_t + a[2]);
  j[kLElb] = {j[kLSho].x + lua.x * p.uarm_len, j[kLSho].y + lua.y * p.uarm_len};
  Pt lla = dir(th_t + a[2] + a[3]);
  j[kLWri] = {j[kLElb].x + lla.x * p.larm_len, j[kLElb].y + lla.y * p.larm_len};
  Pt rua = dir(th_t + a[4]);
  j[kRElb] = {j[kRSho].x + rua.x * p.uarm_len, j[kRSho].y + rua.y * p.uarm_len};
  Pt rla = dir(th_t + a[4] + a[5]);
  j[kRWri] = {j[kRElb].x + rla.x * p.larm_len, j[kRElb].y + rla.y * p.larm_len};

  j[kLHip] = {j[kPelvis].x + perp.x * p.hip_off, j[kPelvis].y + perp.y * p.hip_off};
  j[kRHip] = {j[kPelvis].x - perp.x * p.hip_off, j[kPelvis].y - perp.y * p.hip_off};
  Pt ll = dir(th_t + a[6]);
  j[kLAnk] = {j[kLHip].x + ll.x * p.leg_len, j[kLHip].y + ll.y * p.leg_len};
  Pt rl = dir(th_t + a[7]);
  j[kRAnk] = {j[kRHip].x + rl.x * p.leg_len, j[kRHip].y + rl.y * p.leg_len};
  j[kLKnee] = {(j[kLHip].x + j[kLAnk].x) / 2, (j[kLHip].y + j[kLAnk].y) / 2};
  j[kRKnee] = {(j[kRHip].x + j[kRAnk].x) / 2, (j[kRHip].y + j[kRAnk].y) / 2};
  return j;
}

inline Tensor<float> keypoints_tensor(const std::array<Pt, kNumJoints>& joints, int size) {
  Tensor<float> kp({kNumJoints, 2});
  for (int i = 0; i < kNumJoints; ++i) {
    kp[i * 2 + 0] = static_cast<float>(std::min(std::max(joints[i].x, 0.0), size - 1.0));
    kp[i * 2 + 1] = static_cast<float>(std::min(std::max(joints[i].y, 0.0), size - 1.0));
  }
  return kp;
}

inline constexpr double kAngleLo[8] = {-0.25, -0.4, -1.6, -2.0, -1.6, -2.0, -0.5, -0.5};
inline constexpr double kAngleHi[8] = {0.25, 0.4, 1.6, 2.0, 1.6, 2.0, 0.5, 0.5};

// Temporally smooth pose sequence: bounded random walk with reflection.
inline std::vector<PoseSample> pose_sequence(const PersonSpec& p, const WorldConfig& cfg,
                                             int n_frames) {
  std::vector<PoseSample> seq;
  seq.reserve(n_frames);
  Rng rng(Rng::mix(p.seed ^ 0x905eULL ^ cfg.seed));
  PoseSample cur;
  for (int i = 0; i < 8; ++i) cur.joint_angles[i] = rng.uniform(kAngleLo[i], kAngleHi[i]);
  double cx = cfg.image_size / 2.0;
  // pelvis placed so that head and feet both stay on screen
  double cy = cfg.image_size / 2.0 + 0.18 * cfg.image_size - (p.leg_len - 20.0 * cfg.image_size / 64.0) / 2.0;
  cur.root_x = cx + rng.uniform(-3, 3) * cfg.image_size / 64.0;
  cur.root_y = cy + rng.uniform(-2, 2) * cfg.image_size / 64.0;
  for (int f = 0; f < n_frames; ++f) {
    if (f > 0) {
      for (int i = 0; i < 8; ++i) {
        double d = rng.uniform(-cfg.max_angle_delta, cfg.max_angle_delta);
        double a = cur.joint_angles[i] + d;
        if (a > kAngleHi[i]) a = 2 * kAngleHi[i] - a;
        if (a < kAngleLo[i]) a = 2 * kAngleLo[i] - a;
        cur.joint_angles[i] = a;
      }
      auto walk = [&](double v, double lo, double hi) {
        double d = rng.uniform(-1.0, 1.0) * cfg.image_size / 64.0;
        double np = v + d;
        if (np > hi) np = 2 * hi - np;
        if (np < lo) np = 2 * lo - np;
        return np;
      };
      double m = 5.0 * cfg.image_size / 64.0;
      cur.root_x = walk(cur.root_x, cx - m, cx + m);
      cur.root_y = walk(cur.root_y, cy - m * 0.6, cy + m * 0.6);
    }
    PoseSample out = cur;
    out.keypoints = keypoints_tensor(forward_kinematics(p, cur), cfg.image_size);
    seq.push_back(std::move(out));
  }
  return seq;
}

inline Tensor<float> rasterize_stickman(const Tensor<float>& keypoints, const WorldConfig& cfg);

namespace detail {
struct CapsuleHit {
  bool inside = false;
  double u = 0, v = 0;
};
inline CapsuleHit capsule_coords(double px, double py, Pt a, Pt b, double width) {
  CapsuleHit h;
  double dx = b.x - a.x, dy = b.y - a.y;
  double len2 = dx * dx + dy * dy;
  double t, r;
  if (len2 < 1e-12) {
    t = 0;
    r = std::hypot(px - a.x, py - a.y);
    h.inside = r <= width / 2;
    h.u = 0;
    h.v = std::min(std::max(0.5 + r / width, 0.0), 1.0);
    return h;
  }
  double len = std::sqrt(len2);
  double ex = dx / len, ey = dy / len;
  double qx = px - a.x, qy = py - a.y;
  t = qx * ex + qy * ey;
  r = qx * ey - qy * ex;  // signed perpendicular offset
  double dist;
  if (t < 0)
    dist = std::hypot(t, r);
  else if (t > len)
    dist = std::hypot(t - len, r);
  else
    dist = std::abs(r);
  h.inside = dist <= width / 2;
  h.u = std::min(std::max(t / len, 0.0), 1.0);
  h.v = std::min(std::max(0.5 + r / width, 0.0), 1.0);
  return h;
}
}  // namespace detail

// Exact ground truth: hard per-pixel part assignment in painter's order, with
// capsule-local (axial, radial) coordinates as UV. The image is the GT atlas
// sampled through (C*, S*), so the rendering model reproduces it exactly.
inline GTFrame render_gt(const PersonSpec& person, const PoseSample& pose, const WorldConfig& cfg,
                         const Tensor<float>& gt_atlas, const Tensor<float>& background) {
  cfg.validate();
  int n = cfg.n_parts, H = cfg.image_size, W = cfg.image_size, nt = cfg.atlas_size;
  int nseg = cfg.segments_per_part();
  auto joints = forward_kinematics(person, pose);

  GTFrame f;
  f.image = Tensor<float>({3, H, W});
  f.mask = Tensor<float>({1, H, W});
  f.scores = Tensor<float>({n + 1, H, W});
  f.uv = Tensor<float>({2 * n, H, W});
  f.keypoints = keypoints_tensor(joints, cfg.image_size);

  const double widths[8] = {person.head_w, person.torso_w, person.arm_w, person.arm_w,
                            person.arm_w,  person.arm_w,  person.leg_w, person.leg_w};

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int hit_part = -1;
      double hu = 0, hv = 0;
      for (int pi = 0; pi < 8 && hit_part < 0; ++pi) {
        int base = kDrawPriority[pi];
        Pt a = joints[kPartJointA[base]];
        Pt b = joints[kPartJointB[base]];
        auto h = detail::capsule_coords(x, y, a, b, widths[base]);
        if (!h.inside) continue;
        // map onto the owning segment of the subdivided capsule
        double useg = h.u * nseg;
        int seg = std::min(static_cast<int>(useg), nseg - 1);
        hit_part = base * nseg + seg;
        hu = useg - seg;
        hv = h.v;
      }
      if (hit_part >= 0) {
        f.scores.at3(hit_part, y, x) = 1.0f;
        f.mask.at3(0, y, x) = 1.0f;
        f.uv.at3(2 * hit_part, y, x) = static_cast<float>(hu);
        f.uv.at3(2 * hit_part + 1, y, x) = static_cast<float>(hv);
        for (int c = 0; c < 3; ++c)
          f.image.at3(c, y, x) = sample_bilinear(
              gt_atlas.ptr() + (static_cast<int64_t>(hit_part) * 3 + c) * nt * nt, nt, nt,
              static_cast<float>(hu), static_cast<float>(hv));
      } else {
        f.scores.at3(n, y, x) = 1.0f;
        for (int c = 0; c < 3; ++c) f.image.at3(c, y, x) = background.at3(c, y, x);
      }
    }

  f.stickman = rasterize_stickman(f.keypoints, cfg);
  return f;
}

// Anti-aliased stickman raster, one channel per bone plus a root-disc channel.
inline Tensor<float> rasterize_stickman(const Tensor<float>& keypoints, const WorldConfig& cfg) {
  int H = cfg.image_size, W = cfg.image_size;
  double w = cfg.stick_width * cfg.image_size / 64.0;
  Tensor<float> out({kStickmanChannels, H, W});
  for (int i = 0; i < keypoints.numel(); ++i)
    if (!std::isfinite(static_cast<double>(keypoints[i])))
      throw std::invalid_argument("rasterize_stickman: non-finite keypoint");

  auto draw = [&](int ch, Pt a, Pt b) {
    int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - w)));
    int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + w)));
    int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - w)));
    int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + w)));
    double dx = b.x - a.x, dy = b.y - a.y, len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double t = len2 > 1e-12 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
        t = std::min(std::max(t, 0.0), 1.0);
        double d = std::hypot(x - (a.x + t * dx), y - (a.y + t * dy));
        double v = std::min(std::max(w / 2 + 0.5 - d, 0.0), 1.0);
        if (v > out.at3(ch, y, x)) out.at3(ch, y, x) = static_cast<float>(v);
      }
  };

  for (int bone = 0; bone < kNumBones; ++bone) {
    Pt a{keypoints[kBoneA[bone] * 2], keypoints[kBoneA[bone] * 2 + 1]};
    Pt b{keypoints[kBoneB[bone] * 2], keypoints[kBoneB[bone] * 2 + 1]};
    draw(bone, a, b);
  }
  Pt root{keypoints[kPelvis * 2], keypoints[kPelvis * 2 + 1]};
  draw(kNumBones, root, root);
  return out;
}

// Bilinear splat of foreground pixel colors into the atlas; texels that
// received weight >= 0.5 are marked visible, everything else stays zero.
inline PartialTexture extract_partial_texture(const Tensor<float>& image, const Tensor<float>& uv,
                                              const Tensor<float>& scores, int atlas_size) {
  int n = uv.shape[0] / 2, H = uv.shape[1], W = uv.shape[2], nt = atlas_size;
  PartialTexture pt;
  pt.atlas = Tensor<float>({n, 3, nt, nt});
  pt.sigma = Tensor<float>({n, nt, nt});
  Tensor<float> wsum({n, nt, nt});

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int best = n;
      float bs = 0.5f;
      for (int k = 0; k <= n; ++k) {
        float s = scores.at3(k, y, x);
        if (s >= bs) {
          bs = s;
          best = k;
        }
      }
      if (best >= n) continue;
      float u = uv.at3(2 * best, y, x), v = uv.at3(2 * best + 1, y, x);
      auto ax = motra::detail::locate(u, nt);
      auto ay = motra::detail::locate(v, nt);
      const double wts[4] = {(1.0 - ax.frac) * (1.0 - ay.frac), ax.frac * (1.0 - ay.frac),
                             (1.0 - ax.frac) * ay.frac, ax.frac * ay.frac};
      const int xs[4] = {ax.i0, ax.i1, ax.i0, ax.i1};
      const int ys[4] = {ay.i0, ay.i0, ay.i1, ay.i1};
      for (int q = 0; q < 4; ++q) {
        wsum.at3(best, ys[q], xs[q]) += static_cast<float>(wts[q]);
        for (int c = 0; c < 3; ++c)
          pt.atlas[(static_cast<int64_t>(best) * 3 + c) * nt * nt + ys[q] * nt + xs[q]] +=
              static_cast<float>(wts[q]) * image.at3(c, y, x);
      }
    }

  for (int k = 0; k < n; ++k)
    for (int i = 0; i < nt * nt; ++i) {
      float ww = wsum.data[k * nt * nt + i];
      bool vis = ww >= 0.5f;
      pt.sigma.data[k * nt * nt + i] = vis ? 1.0f : 0.0f;
      for (int c = 0; c < 3; ++c) {
        auto& texel = pt.atlas.data[(static_cast<int64_t>(k) * 3 + c) * nt * nt + i];
        texel = vis ? texel / ww : 0.0f;
      }
    }
  return pt;
}

// ---- dataset persistence ----

struct FrameRecord {
  std::string person;
  int frame = 0;
  std::string path;
};

inline nlohmann::json world_config_json(const WorldConfig& c) {
  return {{"n_parts", c.n_parts},
          {"image_size", c.image_size},
          {"atlas_size", c.atlas_size},
          {"persons_train", c.persons_train},
          {"persons_test", c.persons_test},
          {"frames_per_person", c.frames_per_person},
          {"stick_width", c.stick_width},
          {"max_angle_delta", c.max_angle_delta},
          {"seed", c.seed}};
}

inline WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  c.n_parts = j.at("n_parts");
  c.image_size = j.at("image_size");
  c.atlas_size = j.at("atlas_size");
  c.persons_train = j.at("persons_train");
  c.persons_test = j.at("persons_test");
  c.frames_per_person = j.at("frames_per_person");
  c.stick_width = j.at("stick_width");
  c.max_angle_delta = j.at("max_angle_delta");
  c.seed = j.at("seed");
  return c;
}

inline std::string frame_name(int idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d.tns", idx);
  return buf;
}

// Writes <root>/index.json, per-person meta bundles and per-frame bundles.
inline void generate_dataset(const WorldConfig& cfg, const std::string& root, bool force = false) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw std::runtime_error("dataset dir exists and is not empty: " + root +
                                         " (use --force to overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root);

  nlohmann::json persons = nlohmann::json::array();
  nlohmann::json frames = nlohmann::json::array();
  int total = cfg.persons_train + cfg.persons_test;
  for (int pi = 0; pi < total; ++pi) {
    bool is_train = pi < cfg.persons_train;
    std::string id = (is_train ? "train_" : "test_") +
                     std::to_string(is_train ? pi : pi - cfg.persons_train);
    uint64_t pseed = Rng::mix(cfg.seed ^ (0xa11ce000ULL + pi));
    PersonSpec person = make_person(pseed, cfg, id);
    fs::create_directories(fs::path(root) / id);

    Tensor<float> atlas = make_gt_atlas(person, cfg);
    Tensor<float> bgim = make_background(person, cfg.image_size);
    Tensor<float> palette({cfg.n_parts, 3});
    int nt = cfg.atlas_size;
    for (int k = 0; k < cfg.n_parts; ++k)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int i = 0; i < nt * nt; ++i)
          s += atlas.data[(static_cast<int64_t>(k) * 3 + c) * nt * nt + i];
        palette[k * 3 + c] = static_cast<float>(s / (nt * nt));
      }
    Bundle pb;
    pb.put("background", bgim);
    pb.put("gt_atlas", atlas);
    pb.put("palette", palette);
    pb.meta["person_id"] = id;
    pb.meta["seed"] = pseed;
    pb.meta["split"] = is_train ? "train" : "test";
    pb.save((fs::path(root) / id / "person.tns").string(), kMagicData);

    auto poses = pose_sequence(person, cfg, cfg.frames_per_person);
    for (int fi = 0; fi < cfg.frames_per_person; ++fi) {
      GTFrame f = render_gt(person, poses[fi], cfg, atlas, bgim);
      Bundle fb;
      fb.put("image", f.image);
      fb.put("mask", f.mask);
      fb.put("scores", f.scores);
      fb.put("uv", f.uv);
      fb.put("stickman", f.stickman);
      fb.put("keypoints", f.keypoints);
      std::string rel = id + "/" + frame_name(fi);
      fb.save((fs::path(root) / rel).string(), kMagicData);
      frames.push_back({{"person", id}, {"frame", fi}, {"path", rel}});
    }
    persons.push_back({{"id", id},
                       {"split", is_train ? "train" : "test"},
                       {"seed", pseed},
                       {"frames", cfg.frames_per_person}});
  }

  nlohmann::json index = {{"config", world_config_json(cfg)},
                          {"persons", persons},
                          {"frames", frames}};
  std::ofstream f(fs::path(root) / "index.json");
  f << index.dump(2) << "\n";
}

// Read-side view of a generated dataset with a one-person frame cache.
class Dataset {
 public:
  explicit Dataset(const std::string& root) : root_(root) {
    std::ifstream f(std::filesystem::path(root) / "index.json");
    if (!f) throw std::runtime_error("dataset: missing index.json in " + root);
    nlohmann::json index = nlohmann::json::parse(f);
    cfg_ = world_config_from_json(index.at("config"));
    for (const auto& p : index.at("persons")) {
      PersonEntry e;
      e.id = p.at("id");
      e.split = p.at("split");
      e.seed = p.at("seed");
      e.frames = p.at("frames");
      persons_.push_back(e);
    }
  }

  struct PersonEntry {
    std::string id, split;
    uint64_t seed = 0;
    int frames = 0;
  };

  const WorldConfig& config() const { return cfg_; }
  const std::vector<PersonEntry>& persons() const { return persons_; }

  std::vector<std::string> person_ids(const std::string& split) const {
    std::vector<std::string> r;
    for (const auto& p : persons_)
      if (p.split == split) r.push_back(p.id);
    return r;
  }

  int frames_of(const std::string& id) const {
    for (const auto& p : persons_)
      if (p.id == id) return p.frames;
    throw std::runtime_error("dataset: unknown person " + id);
  }

  Bundle person_meta(const std::string& id) const {
    return Bundle::load((std::filesystem::path(root_) / id / "person.tns").string(), kMagicData);
  }

  const Bundle& frame(const std::string& id, int idx) const {
    auto key = id + "/" + frame_name(idx);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      if (cache_person_ != id) {
        cache_.clear();
        cache_person_ = id;
      }
      it = cache_.emplace(key, Bundle::load((std::filesystem::path(root_) / key).string(),
                                            kMagicData))
               .first;
    }
    return it->second;
  }

 private:
  std::string root_;
  WorldConfig cfg_;
  std::vector<PersonEntry> persons_;
  mutable std::map<std::string, Bundle> cache_;
  mutable std::string cache_person_;
};

}  // namespace motra::world
