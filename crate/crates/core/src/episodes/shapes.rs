//! Shape classes and their rasterization.

use std::fmt;

pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disk = 0,
    Square = 1,
    Triangle = 2,
    Ring = 3,
    Cross = 4,
    Diamond = 5,
    HBar = 6,
    VBar = 7,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Ring,
        ShapeClass::Cross,
        ShapeClass::Diamond,
        ShapeClass::HBar,
        ShapeClass::VBar,
    ];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// Designated near-duplicate used for target-similar support backgrounds.
    pub fn lookalike(self) -> ShapeClass {
        use ShapeClass::*;
        match self {
            Disk => Ring,
            Ring => Disk,
            Square => Diamond,
            Diamond => Square,
            Triangle => Cross,
            Cross => Triangle,
            HBar => VBar,
            VBar => HBar,
        }
    }

    /// Half extent of the bounding box as a multiple of the shape radius.
    pub fn extent(self) -> f32 {
        match self {
            ShapeClass::Diamond => 1.1,
            _ => 1.0,
        }
    }

    /// Point membership relative to the shape center, in units of pixels.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        use ShapeClass::*;
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Disk => dx * dx + dy * dy <= r * r,
            Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Triangle => {
                // apex up, base at dy = 0.8 r
                dy >= -r && dy <= 0.8 * r && ax <= (dy + r) / 1.8
            }
            Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Cross => (ax <= 0.35 * r && ay <= r) || (ay <= 0.35 * r && ax <= r),
            Diamond => ax + ay <= 1.1 * r,
            HBar => ax <= r && ay <= 0.45 * r,
            VBar => ay <= r && ax <= 0.45 * r,
        }
    }

    pub fn name(self) -> &'static str {
        use ShapeClass::*;
        match self {
            Disk => "disk",
            Square => "square",
            Triangle => "triangle",
            Ring => "ring",
            Cross => "cross",
            Diamond => "diamond",
            HBar => "h-bar",
            VBar => "v-bar",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One placed shape. Metadata fully determines the shape's pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeInstance {
    pub class: ShapeClass,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub intensity: f32,
    /// True for the episode category's own shapes; these make up the mask.
    pub is_target: bool,
}

impl ShapeInstance {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f32 + 0.5 - self.cx;
        let dy = y as f32 + 0.5 - self.cy;
        self.class.contains(dx, dy, self.radius)
    }

    pub fn half_extent(&self) -> f32 {
        self.radius * self.class.extent()
    }

    pub fn overlaps(&self, other: &ShapeInstance, margin: f32) -> bool {
        let reach = self.half_extent() + other.half_extent() + margin;
        (self.cx - other.cx).abs() < reach && (self.cy - other.cy).abs() < reach
    }
}

/// Ground-truth mask from metadata: pixels covered by any target shape.
pub fn rasterize_mask(shapes: &[ShapeInstance], size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for s in shapes.iter().filter(|s| s.is_target) {
        for y in 0..size {
            for x in 0..size {
                if s.covers(x, y) {
                    m[y * size + x] = true;
                }
            }
        }
    }
    m
}
