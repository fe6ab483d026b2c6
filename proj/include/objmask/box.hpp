#pragma once

namespace objmask {

// Axis-aligned box in pixel-edge coordinates: pixel (r, c) covers [c, c+1) x [r, r+1).
struct Box {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0f; }
    bool valid() const { return x1 < x2 && y1 < y2; }
    bool operator==(const Box&) const = default;
};

float iou(const Box& a, const Box& b);

}  // namespace objmask
