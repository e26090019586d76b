#pragma once

namespace customtext {

// Axis-aligned pixel rectangle; [x, x+w) × [y, y+h).
struct Box {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  int right() const { return x + w; }
  int bottom() const { return y + h; }
  bool intersects(const Box& o) const { return x < o.right() && o.x < right() && y < o.bottom() && o.y < bottom(); }
  bool contains(int px, int py) const { return px >= x && px < right() && py >= y && py < bottom(); }

  friend bool operator==(const Box&, const Box&) = default;
};

}  // namespace customtext
