#pragma once

#include <array>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "motra/synthworld.hpp"
#include "motra/trainer.hpp"

namespace motra {

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1, averaged over valid window centers and RGB channels.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  check_shape(a, b.shape, "ssim");
  if (a.rank() != 3) throw std::invalid_argument("ssim: (C,H,W) expected");
  int C = a.shape[0], H = a.shape[1], W = a.shape[2];
  constexpr int R = 5;  // 11x11
  if (H < 2 * R + 1 || W < 2 * R + 1) throw std::invalid_argument("ssim: image too small");

  std::array<double, 2 * R + 1> g;
  double gs = 0;
  for (int i = -R; i <= R; ++i) {
    g[i + R] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
    gs += g[i + R];
  }
  for (auto& v : g) v /= gs;

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  int64_t count = 0;
  for (int c = 0; c < C; ++c) {
    const float* pa = a.ptr() + static_cast<int64_t>(c) * H * W;
    const float* pb = b.ptr() + static_cast<int64_t>(c) * H * W;
    for (int y = R; y < H - R; ++y)
      for (int x = R; x < W - R; ++x) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (int dy = -R; dy <= R; ++dy)
          for (int dx = -R; dx <= R; ++dx) {
            double w = g[dy + R] * g[dx + R];
            double xa = pa[(y + dy) * W + (x + dx)];
            double xb = pb[(y + dy) * W + (x + dx)];
            ma += w * xa;
            mb += w * xb;
            va += w * xa * xa;
            vb += w * xb * xb;
            cov += w * xa * xb;
          }
        va -= ma * ma;
        vb -= mb * mb;
        cov -= ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

// Keypoints recovered from part scores. Segments of a subdivided part are
// summed back into the 8 base capsules first. Joints whose supporting parts
// have (almost) no score mass are flagged invalid.
struct PoseEstimate {
  Tensor<float> keypoints{std::vector<int>{world::kNumJoints, 2}};
  std::array<bool, world::kNumJoints> valid{};
  bool all_valid = false;
};

namespace evaldetail {

struct PartFit {
  bool ok = false;
  double cx = 0, cy = 0;  // weighted centroid
  double ex = 0, ey = 0;  // principal axis (unit)
  double t_lo = 0, t_hi = 0;        // axial extent over strong pixels
  double joint_lo = 0, joint_hi = 0;  // estimated joint positions along the axis
  double radius = 0;                // capsule radius from the width profile
};

// Weighted capsule fit of one base part. A plain PCA axis tilts whenever an
// occluder (e.g. an arm over the torso flank) removes pixels asymmetrically,
// so the axis is refined against the midline of full-width cross sections,
// which an occluder shortens but the fit then ignores.
inline PartFit fit_part(const std::vector<float>& w, int H, int W) {
  PartFit f;
  double mass = 0, peak = 0;
  for (float v : w) peak = std::max(peak, static_cast<double>(v));
  if (peak <= 1e-4) return f;
  double thr = 0.5 * peak;
  std::vector<std::array<double, 2>> pts;
  double sx = 0, sy = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = w[y * W + x];
      mass += v;
      sx += v * x;
      sy += v * y;
      if (v >= thr) pts.push_back({static_cast<double>(x), static_cast<double>(y)});
    }
  if (mass <= 1.0 || pts.size() < 4) return f;
  f.cx = sx / mass;
  f.cy = sy / mass;
  double sxx = 0, sxy = 0, syy = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = w[y * W + x];
      double dx = x - f.cx, dy = y - f.cy;
      sxx += v * dx * dx;
      sxy += v * dx * dy;
      syy += v * dy * dy;
    }
  // leading eigenvector of the 2x2 covariance
  double tr = sxx + syy, det = sxx * syy - sxy * sxy;
  double lam = tr / 2 + std::sqrt(std::max(tr * tr / 4 - det, 0.0));
  double vx = sxy, vy = lam - sxx;
  if (std::abs(vx) + std::abs(vy) < 1e-12) {
    vx = 1;
    vy = 0;
  }
  double nl = std::hypot(vx, vy);
  f.ex = vx / nl;
  f.ey = vy / nl;

  double wmax = 0;
  for (int iter = 0; iter < 3; ++iter) {
    // cross sections of one-pixel axial slices
    double ux = f.ey, uy = -f.ex;
    double t0 = 1e30, t1 = -1e30;
    for (auto& p : pts) {
      double t = (p[0] - f.cx) * f.ex + (p[1] - f.cy) * f.ey;
      t0 = std::min(t0, t);
      t1 = std::max(t1, t);
    }
    int nb = static_cast<int>(t1 - t0) + 1;
    std::vector<double> smin(nb, 1e30), smax(nb, -1e30);
    for (auto& p : pts) {
      double t = (p[0] - f.cx) * f.ex + (p[1] - f.cy) * f.ey;
      double s = (p[0] - f.cx) * ux + (p[1] - f.cy) * uy;
      int bin = std::min(static_cast<int>(t - t0), nb - 1);
      smin[bin] = std::min(smin[bin], s);
      smax[bin] = std::max(smax[bin], s);
    }
    wmax = 0;
    for (int b = 0; b < nb; ++b)
      if (smax[b] >= smin[b]) wmax = std::max(wmax, smax[b] - smin[b]);
    // least squares midline over full-width slices only
    double n = 0, st = 0, ss = 0, stt = 0, sts = 0;
    for (int b = 0; b < nb; ++b) {
      if (smax[b] < smin[b] || smax[b] - smin[b] < wmax - 1.5) continue;
      double t = t0 + b + 0.5, s = (smin[b] + smax[b]) / 2;
      n += 1;
      st += t;
      ss += s;
      stt += t * t;
      sts += t * s;
    }
    double den = n * stt - st * st;
    if (n < 3 || std::abs(den) < 1e-9) break;
    double slope = (n * sts - st * ss) / den;
    double icept = (ss - slope * st) / n;
    f.cx += icept * ux;
    f.cy += icept * uy;
    double nx = f.ex + slope * ux, ny = f.ey + slope * uy;
    double nn = std::hypot(nx, ny);
    f.ex = nx / nn;
    f.ey = ny / nn;
    if (std::abs(slope) < 1e-4 && std::abs(icept) < 1e-3) break;
  }

  // pixel centers sit about half a pixel inside the true outline
  f.radius = wmax / 2 + 0.5;
  double ux = f.ey, uy = -f.ex;
  f.t_lo = 1e30;
  f.t_hi = -1e30;
  std::array<double, 2> plo{}, phi{};
  for (auto& p : pts) {
    double t = (p[0] - f.cx) * f.ex + (p[1] - f.cy) * f.ey;
    if (t - 0.5 < f.t_lo) {
      f.t_lo = t - 0.5;
      plo = p;
    }
    if (t + 0.5 > f.t_hi) {
      f.t_hi = t + 0.5;
      phi = p;
    }
  }
  // a cap cut off by the image border is shorter than the radius; recover the
  // joint from the hemispherical width profile of the surviving cap pixels
  auto at_border = [&](const std::array<double, 2>& p) {
    return p[0] < 1 || p[0] > W - 2 || p[1] < 1 || p[1] > H - 2;
  };
  f.joint_lo = f.t_lo + f.radius;
  f.joint_hi = f.t_hi - f.radius;
  if (at_border(plo) || at_border(phi)) {
    double pro_lo = 1e30, pro_hi = -1e30;
    for (auto& p : pts) {
      double t = (p[0] - f.cx) * f.ex + (p[1] - f.cy) * f.ey;
      double s = (p[0] - f.cx) * ux + (p[1] - f.cy) * uy;
      double d = std::sqrt(std::max(f.radius * f.radius - s * s, 0.0));
      pro_lo = std::min(pro_lo, t - 0.5 + d);
      pro_hi = std::max(pro_hi, t + 0.5 - d);
    }
    if (at_border(plo)) f.joint_lo = std::min(pro_lo, f.t_lo + f.radius);
    if (at_border(phi)) f.joint_hi = std::max(pro_hi, f.t_hi - f.radius);
  }
  f.ok = f.t_hi > f.t_lo;
  return f;
}

inline std::array<double, 2> at(const PartFit& f, double t) {
  return {f.cx + f.ex * t, f.cy + f.ey * t};
}

inline std::array<double, 2> end_lo(const PartFit& f) { return at(f, f.joint_lo); }
inline std::array<double, 2> end_hi(const PartFit& f) { return at(f, f.joint_hi); }

inline double d2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
}

}  // namespace evaldetail

inline PoseEstimate estimate_pose(const Tensor<float>& scores) {
  using namespace world;
  using namespace evaldetail;
  if (scores.rank() != 3) throw std::invalid_argument("estimate_pose: (n+1,H,W) expected");
  int n = scores.shape[0] - 1, H = scores.shape[1], W = scores.shape[2];
  if (n % 8 != 0) throw std::invalid_argument("estimate_pose: n must be a multiple of 8");
  int nseg = n / 8;
  int64_t HW = static_cast<int64_t>(H) * W;

  std::array<PartFit, 8> fits;
  for (int bp = 0; bp < 8; ++bp) {
    std::vector<float> w(HW, 0.0f);
    for (int s = 0; s < nseg; ++s) {
      const float* src = scores.ptr() + (static_cast<int64_t>(bp) * nseg + s) * HW;
      for (int64_t i = 0; i < HW; ++i) w[i] += src[i];
    }
    fits[bp] = fit_part(w, H, W);
  }

  PoseEstimate est;
  std::array<std::array<double, 2>, kNumJoints> J{};
  auto set = [&](int j, std::array<double, 2> p) {
    J[j] = p;
    est.valid[j] = true;
  };

  const PartFit& torso = fits[kTorso];
  const PartFit& head = fits[kHead];
  // pelvis: the torso end away from the head; the neck end is read from the
  // head capsule instead because the head is drawn in front of the torso
  if (torso.ok) {
    auto lo = end_lo(torso), hi = end_hi(torso);
    std::array<double, 2> hc{head.ok ? head.cx : torso.cx, head.ok ? head.cy : torso.cy - 1};
    set(kPelvis, d2(lo, hc) > d2(hi, hc) ? lo : hi);
  }
  if (head.ok && torso.ok) {
    auto lo = end_lo(head), hi = end_hi(head);
    std::array<double, 2> tc{torso.cx, torso.cy};
    bool lo_is_neck = d2(lo, tc) < d2(hi, tc);
    set(kNeck, lo_is_neck ? lo : hi);
    set(kHeadTop, lo_is_neck ? hi : lo);
  }
  if (est.valid[kPelvis] && est.valid[kNeck])
    set(kSpine, {(J[kPelvis][0] + J[kNeck][0]) / 2, (J[kPelvis][1] + J[kNeck][1]) / 2});

  // arms: the shoulder is the upper-arm end sitting on the perpendicular
  // through the neck (a raised elbow can come closer to the neck than the
  // shoulder, so plain distance only breaks ties); the elbow comes from the
  // (never occluded) lower arm, its end nearer that shoulder
  auto arm = [&](int upart, int lpart, int jsho, int jelb, int jwri) {
    const PartFit& u = fits[upart];
    if (u.ok && est.valid[kNeck] && torso.ok) {
      auto sho_score = [&](const std::array<double, 2>& p) {
        double ax = (p[0] - J[kNeck][0]) * torso.ex + (p[1] - J[kNeck][1]) * torso.ey;
        return 2 * std::abs(ax) + std::sqrt(d2(p, J[kNeck]));
      };
      auto lo = end_lo(u), hi = end_hi(u);
      set(jsho, sho_score(lo) < sho_score(hi) ? lo : hi);
    }
    const PartFit& l = fits[lpart];
    if (l.ok && est.valid[jsho]) {
      auto lo = end_lo(l), hi = end_hi(l);
      bool lo_is_elb = d2(lo, J[jsho]) < d2(hi, J[jsho]);
      set(jelb, lo_is_elb ? lo : hi);
      set(jwri, lo_is_elb ? hi : lo);
    }
  };
  arm(kLUArm, kLLArm, kLSho, kLElb, kLWri);
  arm(kRUArm, kRLArm, kRSho, kRElb, kRWri);

  // legs: the hip end hides behind the torso, so take the hip as the point of
  // the leg axis nearest the pelvis; the ankle end is unoccluded
  auto leg = [&](int part, int jhip, int jknee, int jank) {
    const PartFit& f = fits[part];
    if (!f.ok || !est.valid[kPelvis]) return;
    auto lo = end_lo(f), hi = end_hi(f);
    bool hi_is_ank = d2(hi, J[kPelvis]) > d2(lo, J[kPelvis]);
    set(jank, hi_is_ank ? hi : lo);
    double tp = (J[kPelvis][0] - f.cx) * f.ex + (J[kPelvis][1] - f.cy) * f.ey;
    set(jhip, evaldetail::at(f, tp));
    set(jknee, {(J[jhip][0] + J[jank][0]) / 2, (J[jhip][1] + J[jank][1]) / 2});
  };
  leg(kLLeg, kLHip, kLKnee, kLAnk);
  leg(kRLeg, kRHip, kRKnee, kRAnk);

  est.all_valid = true;
  for (int j = 0; j < kNumJoints; ++j) {
    est.keypoints[j * 2 + 0] = static_cast<float>(J[j][0]);
    est.keypoints[j * 2 + 1] = static_cast<float>(J[j][1]);
    est.all_valid = est.all_valid && est.valid[j];
  }
  return est;
}

struct PoseErrorResult {
  double error = 0;     // mean L2 over valid joints, pixels
  int joints_used = 0;  // 0 means undefined (reported as missing)
  bool complete = false;
};

inline PoseErrorResult pose_error(const Tensor<float>& scores, const Tensor<float>& target_kp) {
  check_shape(target_kp, {world::kNumJoints, 2}, "pose_error keypoints");
  PoseEstimate est = estimate_pose(scores);
  PoseErrorResult r;
  double acc = 0;
  for (int j = 0; j < world::kNumJoints; ++j) {
    if (!est.valid[j]) continue;
    double dx = est.keypoints[j * 2] - target_kp[j * 2];
    double dy = est.keypoints[j * 2 + 1] - target_kp[j * 2 + 1];
    acc += std::hypot(dx, dy);
    ++r.joints_used;
  }
  r.complete = est.all_valid;
  r.error = r.joints_used > 0 ? acc / r.joints_used : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// Per-frame and aggregate metrics. LPIPS / FReID need pretrained networks and
// are reported as unsupported in the schema.
struct EvalReport {
  std::vector<double> frame_ssim, frame_masked_l1, frame_pose_err;
  double mean_ssim = std::numeric_limits<double>::quiet_NaN();
  double mean_masked_l1 = std::numeric_limits<double>::quiet_NaN();
  double mean_pose_err = std::numeric_limits<double>::quiet_NaN();
  int pose_complete_frames = 0;
  nlohmann::json config_echo;

  void aggregate() {
    auto mean_of = [](const std::vector<double>& v) {
      double s = 0;
      int c = 0;
      for (double x : v)
        if (std::isfinite(x)) {
          s += x;
          ++c;
        }
      return c ? s / c : std::numeric_limits<double>::quiet_NaN();
    };
    mean_ssim = mean_of(frame_ssim);
    mean_masked_l1 = mean_of(frame_masked_l1);
    mean_pose_err = mean_of(frame_pose_err);
  }

  nlohmann::json to_json() const {
    auto arr = [](const std::vector<double>& v) {
      nlohmann::json a = nlohmann::json::array();
      for (double x : v) {
        if (std::isfinite(x))
          a.push_back(x);
        else
          a.push_back(nullptr);
      }
      return a;
    };
    return {{"ssim", {{"mean", mean_ssim}, {"frames", arr(frame_ssim)}}},
            {"masked_l1", {{"mean", mean_masked_l1}, {"frames", arr(frame_masked_l1)}}},
            {"pose_error", {{"mean", mean_pose_err},
                            {"frames", arr(frame_pose_err)},
                            {"complete_frames", pose_complete_frames}}},
            {"lpips", "unsupported"},
            {"freid", "unsupported"},
            {"config", config_echo}};
  }
};

namespace evaldetail {

inline Tensor<float> slice_frame(const Tensor<float>& t, int i) {
  std::vector<int> shape(t.shape.begin() + 1, t.shape.end());
  Tensor<float> out(shape);
  int64_t per = out.numel();
  std::copy(t.data.begin() + i * per, t.data.begin() + (i + 1) * per, out.data.begin());
  return out;
}

inline double masked_l1(const Tensor<float>& a, const Tensor<float>& b,
                        const Tensor<float>& mask) {
  int64_t HW = static_cast<int64_t>(a.shape[1]) * a.shape[2];
  double acc = 0, massachusetts = 0;
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < HW; ++i) {
      double m = mask.data[i];
      acc += m * std::abs(a.data[c * HW + i] - b.data[c * HW + i]);
      massachusetts += m;
    }
  return massachusetts > 0 ? acc / massachusetts : 0;
}

}  // namespace evaldetail

// Reconstructs each listed frame of one person from its own pose and scores
// the result against the ground truth frame. Model state is not mutated.
inline EvalReport eval_reconstruction(const Checkpoint& ck, const world::Dataset& ds,
                                      const std::string& person,
                                      const std::vector<int>& frame_ids) {
  EvalReport rep;
  rep.config_echo = ck.config;
  for (int fi : frame_ids) {
    const Bundle& f = ds.frame(person, fi);
    Tensor<float> pose = f.get("stickman");
    Tensor<float> poses({1, pose.shape[0], pose.shape[1], pose.shape[2]});
    poses.data = pose.data;
    TransferOut out = transfer(ck, poses);
    Tensor<float> img = evaldetail::slice_frame(out.images, 0);
    Tensor<float> sc = evaldetail::slice_frame(out.scores, 0);
    rep.frame_ssim.push_back(ssim(img, f.get("image")));
    rep.frame_masked_l1.push_back(evaldetail::masked_l1(img, f.get("image"), f.get("mask")));
    auto pe = pose_error(sc, f.get("keypoints"));
    rep.frame_pose_err.push_back(pe.joints_used ? pe.error
                                                : std::numeric_limits<double>::quiet_NaN());
    rep.pose_complete_frames += pe.complete;
  }
  rep.aggregate();
  return rep;
}

// Drives the personalized model with another person's pose sequence. No
// ground-truth image exists, so only the pose error is populated.
inline EvalReport eval_transfer(const Checkpoint& ck, const world::Dataset& ds,
                                const std::string& driving_person,
                                const std::vector<int>& frame_ids) {
  EvalReport rep;
  rep.config_echo = ck.config;
  for (int fi : frame_ids) {
    const Bundle& f = ds.frame(driving_person, fi);
    Tensor<float> pose = f.get("stickman");
    Tensor<float> poses({1, pose.shape[0], pose.shape[1], pose.shape[2]});
    poses.data = pose.data;
    TransferOut out = transfer(ck, poses);
    auto pe = pose_error(evaldetail::slice_frame(out.scores, 0), f.get("keypoints"));
    rep.frame_pose_err.push_back(pe.joints_used ? pe.error
                                                : std::numeric_limits<double>::quiet_NaN());
    rep.pose_complete_frames += pe.complete;
  }
  rep.aggregate();
  return rep;
}

}  // namespace motra
