#include "morph/hwphy.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace morph {

void validate_design(const DesignParams& design, const DesignBounds& bounds) {
  if (design.arity() < 1) throw ConfigError("design has no links");
  for (Index k = 0; k < design.arity(); ++k) {
    const double l = design.link_lengths[k];
    if (!std::isfinite(l) || l < bounds.len_min || l > bounds.len_max) {
      throw ConfigError(fmt::format("link {} length {} outside [{}, {}]", k, l, bounds.len_min, bounds.len_max));
    }
  }
}

DesignParams uniform_design(Index links, double length) {
  return DesignParams{Vector::Constant(links, length)};
}

std::vector<Vec2> forward_kinematics(const DesignParams& design, const Vector& joints) {
  return forward_kinematics<double>(design.link_lengths, joints);
}

Vec2 end_effector(const DesignParams& design, const Vector& joints) {
  if (design.arity() != joints.size() || joints.size() < 1) {
    throw ConfigError(fmt::format("end_effector: design has {} links, joints have {}", design.arity(), joints.size()));
  }
  Vec2 p = Vec2::Zero();
  double heading = 0.0;
  for (Index k = 0; k < joints.size(); ++k) {
    heading += joints[k];
    p += design.link_lengths[k] * Vec2(std::cos(heading), std::sin(heading));
  }
  return p;
}

Vector clip_action(const Vector& action, double a_max) { return action.cwiseMax(-a_max).cwiseMin(a_max); }

Vec2 hwphy_apply(const DesignParams& design, const Vector& joints, const Vector& action, double a_max) {
  if (action.size() != design.arity() || joints.size() != design.arity()) {
    throw ConfigError(fmt::format("hwphy_apply: design has {} links, joints {}, action {}", design.arity(),
                                  joints.size(), action.size()));
  }
  return end_effector(design, joints + clip_action(action, a_max));
}

Vec2 KinematicHardware::apply(const Vector& joints, const Vec2& /*ee*/, const Vector& action) const {
  return hwphy_apply(design_, joints, action, a_max_);
}

// ---------------------------------------------------------------------------
// Geometry helpers

namespace {

double cross(const Vec2& u, const Vec2& v) { return u.x() * v.y() - u.y() * v.x(); }

Vec2 left_normal(const Vec2& dir) { return Vec2(-dir.y(), dir.x()); }

double point_segment_distance(const Vec2& p, const Segment& s) {
  const Vec2 d = s.b - s.a;
  const double len2 = d.squaredNorm();
  double t = len2 > 0.0 ? (p - s.a).dot(d) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (s.a + t * d)).norm();
}

// Offset polyline with mitred joins.
std::vector<Vec2> offset_polyline(const std::vector<Vec2>& line, double offset) {
  std::vector<Vec2> out;
  out.reserve(line.size());
  const std::size_t n = line.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i == 0 || i + 1 == n) {
      const Vec2 dir = (i == 0 ? line[1] - line[0] : line[n - 1] - line[n - 2]).normalized();
      out.push_back(line[i] + offset * left_normal(dir));
      continue;
    }
    const Vec2 d0 = (line[i] - line[i - 1]).normalized();
    const Vec2 d1 = (line[i + 1] - line[i]).normalized();
    const Vec2 n0 = left_normal(d0);
    const Vec2 n1 = left_normal(d1);
    const Vec2 bisector = (n0 + n1).normalized();
    const double c = bisector.dot(n0);
    if (c < 0.2) throw ConfigError("tunnel turns too sharply for a mitred corridor");
    out.push_back(line[i] + (offset / c) * bisector);
  }
  return out;
}

}  // namespace

double crossing_parameter(const Segment& s, const Segment& wall) {
  const Vec2 r = s.b - s.a;
  const Vec2 q = wall.b - wall.a;
  const double d1 = cross(q, s.a - wall.a);
  const double d2 = cross(q, s.b - wall.a);
  const double d3 = cross(r, wall.a - s.a);
  const double d4 = cross(r, wall.b - s.a);
  const bool proper = ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
  if (!proper) return -1.0;
  return d1 / (d1 - d2);
}

// ---------------------------------------------------------------------------
// TunnelGeometry

TunnelGeometry::TunnelGeometry(std::vector<Vec2> centerline, double halfwidth, Vec2 goal, double goal_radius)
    : centerline_(std::move(centerline)), halfwidth_(halfwidth), goal_(goal), goal_radius_(goal_radius) {
  if (centerline_.size() < 2) throw ConfigError("tunnel centerline needs at least two vertices");
  if (!(halfwidth_ > 0.0) || !std::isfinite(halfwidth_)) throw ConfigError("tunnel halfwidth must be positive");
  if (!(goal_radius_ > 0.0) || !std::isfinite(goal_radius_)) throw ConfigError("goal radius must be positive");
  for (std::size_t i = 1; i < centerline_.size(); ++i) {
    if ((centerline_[i] - centerline_[i - 1]).norm() <= 1e-12) {
      throw ConfigError("tunnel centerline has a zero-length segment");
    }
  }
  x_monotone_ = true;
  for (std::size_t i = 1; i < centerline_.size(); ++i) {
    if (!(centerline_[i].x() > centerline_[i - 1].x())) x_monotone_ = false;
  }

  const std::vector<Vec2> left = offset_polyline(centerline_, halfwidth_);
  const std::vector<Vec2> right = offset_polyline(centerline_, -halfwidth_);
  polygon_ = left;
  polygon_.insert(polygon_.end(), right.rbegin(), right.rend());
  for (std::size_t i = 0; i < polygon_.size(); ++i) {
    walls_.push_back(Segment{polygon_[i], polygon_[(i + 1) % polygon_.size()]});
  }
  if (!contains(goal_)) throw ConfigError("goal lies outside the corridor");
}

double TunnelGeometry::entrance_heading() const {
  const Vec2 d = centerline_[1] - centerline_[0];
  return std::atan2(d.y(), d.x());
}

bool TunnelGeometry::contains(const Vec2& p) const {
  for (const auto& w : walls_) {
    if (point_segment_distance(p, w) <= 1e-12) return true;
  }
  bool inside = false;
  const std::size_t n = polygon_.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = polygon_[i];
    const Vec2& b = polygon_[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x_cross = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x_cross) inside = !inside;
    }
  }
  return inside;
}

double TunnelGeometry::distance_outside(const Vec2& p) const {
  if (contains(p)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& w : walls_) best = std::min(best, point_segment_distance(p, w));
  return best;
}

TunnelGeometry make_zigzag_tunnel(int segments, double segment_length, double slope_deg, double halfwidth,
                                  double goal_radius) {
  if (segments < 1) throw ConfigError("zigzag tunnel needs at least one segment");
  if (!(segment_length > 0.0)) throw ConfigError("tunnel segment length must be positive");
  if (!(std::abs(slope_deg) < 80.0)) throw ConfigError("tunnel slope must lie in (-80, 80) degrees");
  const double slope = slope_deg * kPi / 180.0;
  std::vector<Vec2> line{Vec2::Zero()};
  for (int i = 0; i < segments; ++i) {
    const double s = (i % 2 == 0) ? slope : -slope;
    line.push_back(line.back() + segment_length * Vec2(std::cos(s), std::sin(s)));
  }
  const Vec2 last_dir = (line[line.size() - 1] - line[line.size() - 2]).normalized();
  const Vec2 goal = line.back() - goal_radius * last_dir;
  return TunnelGeometry(std::move(line), halfwidth, goal, goal_radius);
}

CenterlinePiece centerline_piece(const TunnelGeometry& tunnel, double x) {
  if (!tunnel.x_monotone()) throw UsageError("centerline height needs an x-monotone tunnel");
  const auto& line = tunnel.centerline();
  CenterlinePiece piece;
  if (x <= line.front().x()) {
    piece.intercept = line.front().y();
    piece.clamped = true;
    return piece;
  }
  if (x >= line.back().x()) {
    piece.intercept = line.back().y();
    piece.clamped = true;
    return piece;
  }
  std::size_t i = 1;
  while (i + 1 < line.size() && x > line[i].x()) ++i;
  const Vec2& a = line[i - 1];
  const Vec2& b = line[i];
  piece.slope = (b.y() - a.y()) / (b.x() - a.x());
  piece.intercept = a.y() - piece.slope * a.x();
  return piece;
}

double tunnel_centerline_y(const TunnelGeometry& tunnel, double x) {
  const CenterlinePiece piece = centerline_piece(tunnel, x);
  return piece.intercept + piece.slope * x;
}

// ---------------------------------------------------------------------------
// Collision

CollisionResult collision_check(const std::vector<Vec2>& chain, const TunnelGeometry& tunnel,
                                int samples_per_link) {
  if (samples_per_link < 2) throw ConfigError("collision check needs at least 2 samples per link");
  CollisionResult result;
  std::vector<std::vector<double>> cuts(chain.size() > 0 ? chain.size() - 1 : 0);
  for (std::size_t k = 0; k < chain.size(); ++k) {
    if (!tunnel.contains(chain[k])) result.colliding = true;
    if (k + 1 == chain.size()) break;
    const Segment link{chain[k], chain[k + 1]};
    for (const auto& w : tunnel.walls()) {
      const double t = crossing_parameter(link, w);
      if (t >= 0.0) cuts[k].push_back(t);
    }
    if (!cuts[k].empty()) result.colliding = true;
  }
  if (!result.colliding) return result;

  for (std::size_t k = 0; k + 1 < chain.size(); ++k) {
    const Vec2& a = chain[k];
    const Vec2 d = chain[k + 1] - a;
    for (int i = 0; i < samples_per_link; ++i) {
      const double t = static_cast<double>(i) / (samples_per_link - 1);
      result.max_penetration = std::max(result.max_penetration, tunnel.distance_outside(a + t * d));
    }
    // Thin excursions between samples still show up at the midpoint of the
    // stretch between two consecutive crossings.
    auto& c = cuts[k];
    if (c.empty()) continue;
    c.push_back(0.0);
    c.push_back(1.0);
    std::sort(c.begin(), c.end());
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      const double mid = 0.5 * (c[i] + c[i + 1]);
      result.max_penetration = std::max(result.max_penetration, tunnel.distance_outside(a + mid * d));
    }
  }
  return result;
}

CollisionResult collision_check(const DesignParams& design, const Vector& joints, const TunnelGeometry& tunnel,
                                int samples_per_link) {
  return collision_check(forward_kinematics(design, joints), tunnel, samples_per_link);
}

}  // namespace morph
