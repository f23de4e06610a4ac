#pragma once

// Physics-based hardware model: a planar serial chain whose link lengths are
// the design parameters, plus the zigzag tunnel it operates in.

#include "morph/common.hpp"

#include <cmath>
#include <string_view>
#include <vector>

namespace morph {

struct DesignBounds {
  double len_min = 0.05;
  double len_max = 5.0;
};

struct DesignParams {
  Vector link_lengths;

  Index arity() const { return link_lengths.size(); }
};

/// Throws ConfigError when a length is non-finite or outside `bounds`.
void validate_design(const DesignParams& design, const DesignBounds& bounds);

DesignParams uniform_design(Index links, double length);

/// Joint positions of an n-link chain: point 0 is `base`, point k adds link
/// k rotated by the cumulative angle of joints 0..k-1, the last point is the
/// end-effector. Angles are relative to the parent link.
template <typename Scalar>
std::vector<Point2<Scalar>> forward_kinematics(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& lengths,
                                               const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& angles,
                                               const Point2<Scalar>& base = Point2<Scalar>::Zero()) {
  if (lengths.size() != angles.size() || lengths.size() < 1) {
    throw ConfigError("forward_kinematics: design and joint arity differ or are zero");
  }
  using std::cos;
  using std::sin;
  std::vector<Point2<Scalar>> points;
  points.reserve(static_cast<std::size_t>(lengths.size()) + 1);
  points.push_back(base);
  Scalar heading(0);
  for (Index k = 0; k < lengths.size(); ++k) {
    heading += angles[k];
    points.push_back(points.back() + lengths[k] * Point2<Scalar>(cos(heading), sin(heading)));
  }
  return points;
}

std::vector<Vec2> forward_kinematics(const DesignParams& design, const Vector& joints);
Vec2 end_effector(const DesignParams& design, const Vector& joints);

/// Clips every entry of `action` to [-a_max, a_max].
Vector clip_action(const Vector& action, double a_max);

/// Task action of the kinematic hardware: end-effector after applying the
/// (clipped) joint deltas.
Vec2 hwphy_apply(const DesignParams& design, const Vector& joints, const Vector& action, double a_max);

/// Backend-agnostic hardware model: maps (state, action) to a task action.
class HardwareModel {
 public:
  virtual ~HardwareModel() = default;
  virtual Vec2 apply(const Vector& joints, const Vec2& ee, const Vector& action) const = 0;
  virtual std::string_view name() const = 0;
};

class KinematicHardware final : public HardwareModel {
 public:
  KinematicHardware(DesignParams design, double a_max) : design_(std::move(design)), a_max_(a_max) {}

  Vec2 apply(const Vector& joints, const Vec2& ee, const Vector& action) const override;
  std::string_view name() const override { return "hwphy"; }

  const DesignParams& design() const { return design_; }
  double a_max() const { return a_max_; }

 private:
  DesignParams design_;
  double a_max_;
};

struct Segment {
  Vec2 a;
  Vec2 b;
};

/// Corridor around a piecewise-linear centerline. The walls are the two
/// mitred offsets of the centerline at +/- halfwidth closed by flat caps at
/// both ends; the corridor is the polygon they bound. The chain base sits at
/// the first centerline vertex, on the entrance cap.
class TunnelGeometry {
 public:
  TunnelGeometry(std::vector<Vec2> centerline, double halfwidth, Vec2 goal, double goal_radius);

  const std::vector<Vec2>& centerline() const { return centerline_; }
  const std::vector<Segment>& walls() const { return walls_; }
  const std::vector<Vec2>& polygon() const { return polygon_; }
  double halfwidth() const { return halfwidth_; }
  const Vec2& goal() const { return goal_; }
  double goal_radius() const { return goal_radius_; }
  const Vec2& base() const { return centerline_.front(); }
  /// Heading of the first centerline segment.
  double entrance_heading() const;
  bool x_monotone() const { return x_monotone_; }

  /// Closed-polygon membership.
  bool contains(const Vec2& p) const;
  /// Distance to the nearest wall when outside, 0 inside.
  double distance_outside(const Vec2& p) const;

 private:
  std::vector<Vec2> centerline_;
  double halfwidth_;
  Vec2 goal_;
  double goal_radius_;
  std::vector<Vec2> polygon_;
  std::vector<Segment> walls_;
  bool x_monotone_ = false;
};

/// Zigzag with `segments` legs of `segment_length` alternating between
/// +slope and -slope, starting at the origin and rising first. The goal sits
/// on the centerline `goal_radius` before the far end.
TunnelGeometry make_zigzag_tunnel(int segments, double segment_length, double slope_deg, double halfwidth,
                                  double goal_radius);

/// Piecewise-linear centerline height; x is clamped to the corridor extent.
/// Requires an x-monotone centerline.
double tunnel_centerline_y(const TunnelGeometry& tunnel, double x);

/// Slope and intercept of the centerline piece used at x.
struct CenterlinePiece {
  double slope = 0.0;
  double intercept = 0.0;
  bool clamped = false;
};
CenterlinePiece centerline_piece(const TunnelGeometry& tunnel, double x);

struct CollisionResult {
  bool colliding = false;
  double max_penetration = 0.0;
};

/// A chain collides when a link properly crosses a wall or a joint lies
/// outside the corridor. Penetration is the largest distance outside over
/// `samples_per_link` evenly spaced points per link and the midpoints of
/// the outside stretches between wall crossings.
CollisionResult collision_check(const DesignParams& design, const Vector& joints, const TunnelGeometry& tunnel,
                                int samples_per_link = 32);
CollisionResult collision_check(const std::vector<Vec2>& chain, const TunnelGeometry& tunnel,
                                int samples_per_link = 32);

/// Proper (non-touching) intersection parameter t along `s` where it crosses
/// `wall`, or a negative value when they do not cross.
double crossing_parameter(const Segment& s, const Segment& wall);

}  // namespace morph
