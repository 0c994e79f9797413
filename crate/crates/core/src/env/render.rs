use super::types::*;

/// 24-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn fill(&mut self, rgb: [u8; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x >= self.width || y >= self.height {
            return;
        }
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Alpha-blend `rgb` over the current pixel; coverage in [0, 1].
    pub fn blend(&mut self, x: usize, y: usize, rgb: [u8; 3], coverage: f64) {
        if x >= self.width || y >= self.height {
            return;
        }
        let a = coverage.clamp(0.0, 1.0);
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let bg = self.data[i + c] as f64;
            self.data[i + c] = (bg + (rgb[c] as f64 - bg) * a).round() as u8;
        }
    }

    /// Normalized float pixels, channel-major rows: one row per pixel of
    /// length 3 flattened later by the patch embedder.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn write_ppm(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(path: &std::path::Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let header_err =
            || std::io::Error::new(std::io::ErrorKind::InvalidData, "bad ppm header");
        let mut fields = Vec::new();
        let mut pos = 0usize;
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?,
            );
        }
        if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
            return Err(header_err());
        }
        let width: usize = fields[1].parse().map_err(|_| header_err())?;
        let height: usize = fields[2].parse().map_err(|_| header_err())?;
        pos += 1; // single whitespace after maxval
        let data = bytes[pos..].to_vec();
        if data.len() != width * height * 3 {
            return Err(header_err());
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

const BG: [u8; 3] = [168, 136, 96];
const DRAWER_BODY: [u8; 3] = [92, 62, 38];
const DRAWER_GAP: [u8; 3] = [24, 24, 24];
const DRAWER_HANDLE: [u8; 3] = [235, 225, 60];
const GRIPPER_OPEN: [u8; 3] = [240, 50, 240];
const GRIPPER_CLOSED: [u8; 3] = [40, 240, 240];

/// Fraction of the workspace an object radius covers.
const OBJ_RADIUS: f64 = 0.045;

fn to_px_x(x: f64, w: usize) -> f64 {
    x * w as f64
}

fn to_px_y(y: f64, h: usize) -> f64 {
    (1.0 - y) * h as f64
}

/// Axis-aligned rectangle fill with exact pixel-box coverage.
fn fill_rect(img: &mut Image, x0: f64, x1: f64, y0: f64, y1: f64, rgb: [u8; 3]) {
    let (px0, px1) = (x0.max(0.0), x1.min(img.width as f64));
    let (py0, py1) = (y0.max(0.0), y1.min(img.height as f64));
    if px0 >= px1 || py0 >= py1 {
        return;
    }
    for py in py0.floor() as usize..(py1.ceil() as usize).min(img.height) {
        for px in px0.floor() as usize..(px1.ceil() as usize).min(img.width) {
            let cov_x = (px1.min(px as f64 + 1.0) - px0.max(px as f64)).max(0.0);
            let cov_y = (py1.min(py as f64 + 1.0) - py0.max(py as f64)).max(0.0);
            img.blend(px, py, rgb, cov_x * cov_y);
        }
    }
}

/// World-space rect (x, y in workspace units) to pixel rect.
fn fill_world_rect(
    img: &mut Image,
    wx: (f64, f64),
    wy: (f64, f64),
    rgb: [u8; 3],
) {
    let x0 = to_px_x(wx.0, img.width);
    let x1 = to_px_x(wx.1, img.width);
    let y0 = to_px_y(wy.1, img.height);
    let y1 = to_px_y(wy.0, img.height);
    fill_rect(img, x0, x1, y0, y1, rgb);
}

fn fill_disc(img: &mut Image, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) {
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(img.width);
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(img.height);
    for py in y0..y1 {
        for px in x0..x1 {
            let d = ((px as f64 + 0.5 - cx).powi(2) + (py as f64 + 0.5 - cy).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            img.blend(px, py, rgb, cov);
        }
    }
}

fn fill_triangle(img: &mut Image, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) {
    // Upright triangle inscribed in the radius; coverage by 2x2 supersampling.
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(img.width);
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(img.height);
    let inside = |x: f64, y: f64| -> bool {
        let dy = y - (cy - r);
        if !(0.0..=2.0 * r).contains(&dy) {
            return false;
        }
        let half_width = r * dy / (2.0 * r);
        (x - cx).abs() <= half_width
    };
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(px as f64 + ox, py as f64 + oy) {
                    hits += 1;
                }
            }
            if hits > 0 {
                img.blend(px, py, rgb, hits as f64 / 4.0);
            }
        }
    }
}

/// 3x5 glyph bitmaps for letter tiles.
fn glyph_rows(g: char) -> [[u8; 3]; 5] {
    match g {
        'A' => [[0, 1, 0], [1, 0, 1], [1, 1, 1], [1, 0, 1], [1, 0, 1]],
        'B' => [[1, 1, 0], [1, 0, 1], [1, 1, 0], [1, 0, 1], [1, 1, 0]],
        'C' => [[0, 1, 1], [1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 1, 1]],
        _ => [[1, 0, 1], [0, 1, 0], [1, 0, 1], [0, 1, 0], [1, 0, 1]],
    }
}

fn draw_object(img: &mut Image, obj: &ObjectInstance, registry_glyph: Option<char>) {
    let w = img.width;
    let h = img.height;
    let cx = to_px_x(obj.position[0], w);
    let cy = to_px_y(obj.position[1], h);
    let r = OBJ_RADIUS * w.min(h) as f64;
    let rgb = obj.color.rgb();
    match obj.shape {
        crate::registry::Shape::Round => fill_disc(img, cx, cy, r, rgb),
        crate::registry::Shape::Square => {
            fill_rect(img, cx - r, cx + r, cy - r, cy + r, rgb);
            if obj.category == crate::registry::Category::Can {
                // Cans carry a light band so they differ from blocks.
                fill_rect(img, cx - r, cx + r, cy - r * 0.25, cy + r * 0.25, [250, 250, 250]);
            }
        }
        crate::registry::Shape::Triangle => fill_triangle(img, cx, cy, r, rgb),
        crate::registry::Shape::Tile => {
            fill_rect(img, cx - r, cx + r, cy - r, cy + r, [245, 245, 245]);
            if let Some(g) = registry_glyph {
                let rows = glyph_rows(g);
                let cell = (2.0 * r) / 6.0;
                for (ry, row) in rows.iter().enumerate() {
                    for (rx, &on) in row.iter().enumerate() {
                        if on == 1 {
                            let gx0 = cx - 1.5 * cell + rx as f64 * cell;
                            let gy0 = cy - 2.5 * cell + ry as f64 * cell;
                            fill_rect(img, gx0, gx0 + cell, gy0, gy0 + cell, [10, 10, 10]);
                        }
                    }
                }
            }
        }
    }
}

fn draw_gripper(img: &mut Image, state: &EnvState) {
    let w = img.width;
    let h = img.height;
    let cx = to_px_x(state.gripper_pose[0], w);
    let cy = to_px_y(state.gripper_pose[1], h);
    // Arm length grows with height so z is visible in the raster.
    let len = (0.055 + 0.05 * state.gripper_pose[2]) * w.min(h) as f64;
    let rgb = if state.gripper_closed {
        GRIPPER_CLOSED
    } else {
        GRIPPER_OPEN
    };
    let angle = state.wrist_angle;
    for arm in 0..2 {
        let theta = angle + arm as f64 * std::f64::consts::FRAC_PI_2;
        let (s, c) = theta.sin_cos();
        let steps = (len * 2.0).ceil() as i32;
        for i in -steps..=steps {
            let t = i as f64 / steps as f64 * len;
            let px = cx + c * t;
            let py = cy + s * t;
            fill_rect(img, px - 0.6, px + 0.6, py - 0.6, py + 0.6, rgb);
        }
    }
}

/// Deterministic rasterization of a state. Objects draw in id order; a held
/// object renders at the gripper.
pub fn render(state: &EnvState, width: usize, height: usize) -> Image {
    assert!(width >= 16 && height >= 16, "render needs at least 16x16");
    let mut img = Image::new(width, height);
    img.fill(BG);

    // Drawer body, interior, opening gap, handle.
    fill_world_rect(&mut img, drawer::BODY_X, drawer::BODY_Y, DRAWER_BODY);
    fill_world_rect(
        &mut img,
        drawer::INTERIOR_X,
        drawer::INTERIOR_Y,
        [60, 40, 25],
    );
    let front = drawer::front_y(state.drawer_open_frac);
    if state.drawer_open_frac > 0.0 {
        fill_world_rect(
            &mut img,
            drawer::INTERIOR_X,
            (front, drawer::BODY_Y.0),
            DRAWER_GAP,
        );
    }
    fill_world_rect(
        &mut img,
        (drawer::HANDLE_X - 0.04, drawer::HANDLE_X + 0.04),
        (front - 0.025, front),
        DRAWER_HANDLE,
    );

    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by(|&a, &b| state.objects[a].id.cmp(&state.objects[b].id));
    for idx in order {
        let obj = &state.objects[idx];
        let glyph = glyph_for_kind(&obj.kind);
        let mut drawn = obj.clone();
        if obj.held {
            drawn.position = state.gripper_pose;
        }
        draw_object(&mut img, &drawn, glyph);
    }
    draw_gripper(&mut img, state);
    img
}

fn glyph_for_kind(kind: &str) -> Option<char> {
    match kind {
        "tile_a" => Some('A'),
        "tile_b" => Some('B'),
        "tile_c" => Some('C'),
        _ => None,
    }
}

/// Color helper used by render tests.
pub fn is_reddish(px: [u8; 3]) -> bool {
    px[0] > 150 && px[1] < 110 && px[2] < 110
}

/// Drawer drawing region in pixels, for pixel-diff masks.
pub fn drawer_region_px(width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (drawer::REGION_X.0 * width as f64).floor() as usize;
    let x1 = (drawer::REGION_X.1 * width as f64).ceil() as usize;
    let y0 = ((1.0 - drawer::REGION_Y.1) * height as f64).floor() as usize;
    let y1 = ((1.0 - drawer::REGION_Y.0) * height as f64).ceil() as usize;
    (x0, x1.min(width), y0, y1.min(height))
}
