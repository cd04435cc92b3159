#pragma once

#include <array>
#include <cmath>

namespace asmr {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Point2 a, Point2 b) { return a.x == b.x && a.y == b.y; }
};

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline double distance(Point2 a, Point2 b) { return norm(a - b); }
inline double squared_distance(Point2 a, Point2 b) {
  const Point2 d = a - b;
  return d.x * d.x + d.y * d.y;
}

inline Point2 midpoint(Point2 a, Point2 b) { return {0.5 * (a.x + b.x), 0.5 * (a.y + b.y)}; }

/// Twice the signed area of (a, b, c); positive for counter-clockwise order.
inline double orient(Point2 a, Point2 b, Point2 c) { return cross(b - a, c - a); }

inline Point2 centroid(Point2 a, Point2 b, Point2 c) {
  return {(a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0};
}

/// Barycentric coordinates of p with respect to (a, b, c). The triangle must be non-degenerate.
inline std::array<double, 3> barycentric(Point2 p, Point2 a, Point2 b, Point2 c) {
  const double det = orient(a, b, c);
  const double l0 = orient(p, b, c) / det;
  const double l1 = orient(a, p, c) / det;
  return {l0, l1, 1.0 - l0 - l1};
}

/// Euclidean distance from p to the segment [a, b].
inline double segment_distance(Point2 p, Point2 a, Point2 b) {
  const Point2 ab = b - a;
  const double len2 = dot(ab, ab);
  double s = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  s = s < 0.0 ? 0.0 : (s > 1.0 ? 1.0 : s);
  return distance(p, a + s * ab);
}

}  // namespace asmr
