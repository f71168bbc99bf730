#pragma once

#include <array>
#include <cstdint>

namespace vlpt {

/// Built-in 5x7 dot-matrix font covering a-z, A-Z, 0-9. Row bytes use the
/// low 5 bits, bit 4 = leftmost column.
bool has_glyph(char c);
const std::array<uint8_t, 7>& glyph_rows(char c);

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;
/// Advance between glyph origins in font units (one blank column).
constexpr int kGlyphAdvance = 6;

} // namespace vlpt
