#pragma once

#include <algorithm>
#include <stdexcept>

namespace defyolo {

// Axis-aligned box, (x1,y1) top-left, (x2,y2) bottom-right, pixel units.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return (x1 + x2) / 2; }
    double cy() const { return (y1 + y2) / 2; }
    bool valid() const { return x2 > x1 && y2 > y1; }
    bool contains(double px, double py) const {
        return px >= x1 && px <= x2 && py >= y1 && py <= y2;
    }
};

inline double box_iou(const Box& a, const Box& b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: zero-area box");
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

}  // namespace defyolo
