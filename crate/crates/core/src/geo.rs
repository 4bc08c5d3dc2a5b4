//! Geographic primitives: points, four-corner footprints, the overlapping
//! slippy-map tile grid, areas and overlap measures.
//!
//! Planar operations (IoU, containment, clipping) run in the unit Web
//! Mercator square, `x = (lon + 180) / 360` and `y` growing southward from 0
//! at the northern Mercator limit to 1 at the southern one. Tiles are
//! axis-aligned there, so tile geometry is exact. Areas in square kilometres
//! are computed on the sphere for polygons whose edges are rhumb lines, which
//! are exactly the straight segments of the Mercator plane.

use std::f64::consts::{FRAC_PI_4, LN_2, PI};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Kind, Rotation};

/// Mean Earth radius (km).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;
/// Northern/southern limit of the Web Mercator square, `atan(sinh(pi))`.
pub const MAX_LAT: f64 = 85.051_128_779_806_59;
/// Area visible from the ISS at a given instant (sq km).
pub const VISIBLE_AREA_SQKM: f64 = 2.0e7;
/// Default search radius around the nadir point (km).
pub const DEFAULT_VISIBLE_RADIUS_KM: f64 = 2543.0;
/// Zoom levels of the database tiles.
pub const DATABASE_ZOOMS: [u8; 5] = [8, 9, 10, 11, 12];
pub const MAX_TILE_ZOOM: u8 = 24;

/// Overlaps smaller than this fraction of the smaller footprint are treated
/// as touching boundaries (zero-area intersection).
const TOUCH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Longitude must lie in `[-180, 180]`; 180 is accepted so that footprint
    /// corners can sit on the eastern edge of the map.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite()
            || !lon.is_finite()
            || lat.abs() > MAX_LAT + 1e-9
            || !(-180.0..=180.0).contains(&lon)
        {
            return Err(Error::InvalidPoint { lat, lon });
        }
        Ok(Self {
            lat: lat.clamp(-MAX_LAT, MAX_LAT),
            lon,
        })
    }

    /// Like [`GeoPoint::new`] but wraps any finite longitude into `[-180, 180)`.
    pub fn wrapped(lat: f64, lon: f64) -> Result<Self> {
        if !lon.is_finite() {
            return Err(Error::InvalidPoint { lat, lon });
        }
        Self::new(lat, wrap_lon(lon))
    }

    pub fn mercator(&self) -> Merc {
        Merc {
            x: (self.lon + 180.0) / 360.0,
            y: lat_to_merc_y(self.lat),
        }
    }

    pub fn antipode(&self) -> GeoPoint {
        GeoPoint {
            lat: -self.lat,
            lon: wrap_lon(self.lon + 180.0),
        }
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }
}

pub fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        -180.0
    } else {
        w
    }
}

fn lat_to_merc_y(lat: f64) -> f64 {
    let phi = lat.to_radians();
    0.5 - (FRAC_PI_4 + phi / 2.0).tan().ln() / (2.0 * PI)
}

fn merc_y_to_lat(y: f64) -> f64 {
    (PI * (1.0 - 2.0 * y)).sinh().atan().to_degrees()
}

/// Great-circle distance in km (haversine).
pub fn great_circle_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Radius (km along the surface) of the spherical cap with the given area.
pub fn visible_radius_km(area_sqkm: f64) -> f64 {
    let cos_theta = 1.0 - area_sqkm / (2.0 * PI * EARTH_RADIUS_KM * EARTH_RADIUS_KM);
    EARTH_RADIUS_KM * cos_theta.clamp(-1.0, 1.0).acos()
}

/// A point in the unit Web Mercator square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merc {
    pub x: f64,
    pub y: f64,
}

fn cross(o: Merc, a: Merc, b: Merc) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed area, taken relative to the first vertex to limit cancellation.
fn shoelace(poly: &[Merc]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let o = poly[0];
    (1..n - 1)
        .map(|i| cross(o, poly[i], poly[i + 1]))
        .sum::<f64>()
        / 2.0
}

fn segments_cross(a: Merc, b: Merc, c: Merc, d: Merc) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Axis-aligned bounds in the Mercator plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MercBounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl MercBounds {
    fn of(pts: &[Merc]) -> Self {
        pts.iter().fold(
            MercBounds {
                min_x: f64::INFINITY,
                min_y: f64::INFINITY,
                max_x: f64::NEG_INFINITY,
                max_y: f64::NEG_INFINITY,
            },
            |b, p| MercBounds {
                min_x: b.min_x.min(p.x),
                min_y: b.min_y.min(p.y),
                max_x: b.max_x.max(p.x),
                max_y: b.max_y.max(p.y),
            },
        )
    }

    pub fn intersects(&self, o: &MercBounds) -> bool {
        self.min_x <= o.max_x && o.min_x <= self.max_x && self.min_y <= o.max_y && o.min_y <= self.max_y
    }
}

/// Ground extent of an image: four corners, nominally NW, NE, SE, SW.
///
/// Either winding is accepted. The quadrilateral must be simple with nonzero
/// area and must not cross the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    corners: [GeoPoint; 4],
}

impl Footprint {
    pub fn new(corners: [GeoPoint; 4]) -> Result<Self> {
        // An edge spanning more than half the globe is read as the short way
        // round, i.e. across the antimeridian, unless it runs between the
        // map's western and eastern limits.
        for i in 0..4 {
            let (a, b) = (corners[i].lon, corners[(i + 1) % 4].lon);
            if (a - b).abs() > 180.0 && !(a.abs() == 180.0 && b.abs() == 180.0) {
                return Err(Error::AntimeridianCrossing);
            }
        }
        let fp = Self { corners };
        let m = fp.projected();
        let area = shoelace(&m).abs();
        if !(area > 1e-24) {
            return Err(Error::DegenerateGeometry("footprint has zero area".into()));
        }
        if segments_cross(m[0], m[1], m[2], m[3]) || segments_cross(m[1], m[2], m[3], m[0]) {
            return Err(Error::DegenerateGeometry("footprint is self-intersecting".into()));
        }
        Ok(fp)
    }

    /// From `[[lat, lon]; 4]`.
    pub fn from_latlon(corners: [[f64; 2]; 4]) -> Result<Self> {
        let mut pts = [GeoPoint { lat: 0.0, lon: 0.0 }; 4];
        for (p, c) in pts.iter_mut().zip(corners) {
            *p = GeoPoint::new(c[0], c[1])?;
        }
        Self::new(pts)
    }

    /// Lat/lon box, corners emitted NW, NE, SE, SW.
    pub fn from_bounds(south: f64, west: f64, north: f64, east: f64) -> Result<Self> {
        Self::from_latlon([[north, west], [north, east], [south, east], [south, west]])
    }

    pub fn corners(&self) -> &[GeoPoint; 4] {
        &self.corners
    }

    pub fn to_latlon(&self) -> [[f64; 2]; 4] {
        self.corners.map(|c| [c.lat, c.lon])
    }

    pub fn reversed(&self) -> Footprint {
        let c = self.corners;
        Footprint {
            corners: [c[3], c[2], c[1], c[0]],
        }
    }

    pub fn projected(&self) -> [Merc; 4] {
        self.corners.map(|c| c.mercator())
    }

    pub fn bounds(&self) -> MercBounds {
        MercBounds::of(&self.projected())
    }

    /// Planar area in the unit Mercator square.
    pub fn mercator_area(&self) -> f64 {
        shoelace(&self.projected()).abs()
    }

    /// Spherical centroid of the four corners.
    pub fn centroid(&self) -> GeoPoint {
        let mut s = [0.0; 3];
        for c in &self.corners {
            let v = c.unit_vector();
            for k in 0..3 {
                s[k] += v[k];
            }
        }
        let lat = s[2].atan2((s[0] * s[0] + s[1] * s[1]).sqrt()).to_degrees();
        let lon = s[1].atan2(s[0]).to_degrees();
        GeoPoint {
            lat: lat.clamp(-MAX_LAT, MAX_LAT),
            lon: wrap_lon(lon),
        }
    }

    /// Boundary-inclusive containment test in the Mercator plane.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let q = p.mercator();
        let m = self.projected();
        let scale = {
            let b = MercBounds::of(&m);
            (b.max_x - b.min_x).max(b.max_y - b.min_y)
        };
        let eps = 1e-12 * scale.max(1e-300) + 1e-15;
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (m[i], m[(i + 1) % 4]);
            if point_segment_distance(q, a, b) <= eps {
                return true;
            }
            if (a.y > q.y) != (b.y > q.y) {
                let xi = a.x + (q.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if q.x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn same_polygon(&self, other: &Footprint) -> bool {
        let a = &self.corners;
        let b = &other.corners;
        (0..4).any(|s| (0..4).all(|i| a[i] == b[(i + s) % 4]) || (0..4).all(|i| a[i] == b[(s + 4 - i) % 4]))
    }

    /// Counter-clockwise (in the plane's own axes) triangles covering the quad.
    fn triangles(&self, origin: Merc) -> Vec<[Merc; 3]> {
        let mut m = self.projected().map(|p| Merc {
            x: p.x - origin.x,
            y: p.y - origin.y,
        });
        if shoelace(&m) < 0.0 {
            m.reverse();
        }
        let split = |a: usize, b: usize, c: usize, d: usize| [[m[a], m[b], m[c]], [m[a], m[c], m[d]]];
        let first = split(0, 1, 2, 3);
        let tris = if first.iter().all(|t| shoelace(t) >= 0.0) {
            first
        } else {
            split(1, 2, 3, 0)
        };
        tris.into_iter().filter(|t| shoelace(t) > 0.0).collect()
    }
}

fn point_segment_distance(p: Merc, a: Merc, b: Merc) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()
}

/// Sutherland–Hodgman: clip `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[Merc], clip: &[Merc]) -> Vec<Merc> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in != prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
            if cur_in {
                out.push(cur);
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    out
}

fn line_intersection(p: Merc, q: Merc, a: Merc, b: Merc) -> Merc {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    Merc {
        x: p.x + t * (q.x - p.x),
        y: p.y + t * (q.y - p.y),
    }
}

/// Planar intersection area of two footprints in the Mercator plane.
pub fn intersection_area(a: &Footprint, b: &Footprint) -> f64 {
    if !a.bounds().intersects(&b.bounds()) {
        return 0.0;
    }
    let (ba, bb) = (a.bounds(), b.bounds());
    let origin = Merc {
        x: ba.min_x.min(bb.min_x),
        y: ba.min_y.min(bb.min_y),
    };
    let tb = b.triangles(origin);
    a.triangles(origin)
        .iter()
        .flat_map(|ta| tb.iter().map(move |t| shoelace(&clip_convex(ta, t)).max(0.0)))
        .sum()
}

/// Intersection over union, computed on the Mercator plane.
pub fn footprint_iou(a: &Footprint, b: &Footprint) -> f64 {
    if a.same_polygon(b) {
        return 1.0;
    }
    let (area_a, area_b) = (a.mercator_area(), b.mercator_area());
    let inter = intersection_area(a, b);
    if inter <= TOUCH_EPS * area_a.min(area_b) {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
}

/// True iff the footprints share a positive-area region.
pub fn footprints_overlap(a: &Footprint, b: &Footprint) -> bool {
    footprint_iou(a, b) > 0.0
}

/// Spherical area (sq km) of the footprint with rhumb-line edges.
pub fn footprint_area_sqkm(f: &Footprint) -> Result<f64> {
    // sin(lat) = tanh(Y) with Y the Mercator ordinate in radians, so each
    // edge integral of sin(lat) d(lon) has a closed form in ln cosh(Y).
    let pts: Vec<(f64, f64)> = f
        .corners
        .iter()
        .map(|c| {
            let phi = c.lat.to_radians();
            (c.lon.to_radians(), (FRAC_PI_4 + phi / 2.0).tan().ln())
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..4 {
        let (la, ya) = pts[i];
        let (lb, yb) = pts[(i + 1) % 4];
        let dl = lb - la;
        let dy = yb - ya;
        sum += if dy.abs() < 1e-12 {
            dl * ((ya + yb) / 2.0).tanh()
        } else {
            dl / dy * (ln_cosh(yb) - ln_cosh(ya))
        };
    }
    let area = EARTH_RADIUS_KM * EARTH_RADIUS_KM * sum.abs();
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::DegenerateGeometry("zero spherical area".into()));
    }
    Ok(area)
}

fn ln_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Half-tile shift of one of the four overlapping tile grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileOffset {
    None,
    HalfX,
    HalfY,
    HalfBoth,
}

impl TileOffset {
    pub const ALL: [TileOffset; 4] = [
        TileOffset::None,
        TileOffset::HalfX,
        TileOffset::HalfY,
        TileOffset::HalfBoth,
    ];

    fn shift(self) -> (f64, f64) {
        match self {
            TileOffset::None => (0.0, 0.0),
            TileOffset::HalfX => (0.5, 0.0),
            TileOffset::HalfY => (0.0, 0.5),
            TileOffset::HalfBoth => (0.5, 0.5),
        }
    }
}

/// A slippy-map tile on one of four half-tile-offset grids.
///
/// On a shifted axis the index runs from -1 to `2^zoom - 1`; the two end
/// tiles are clipped to the map edge and are half as wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub zoom: u8,
    pub x: i64,
    pub y: i64,
    pub offset: TileOffset,
}

impl TileId {
    pub fn new(zoom: u8, x: i64, y: i64, offset: TileOffset) -> Result<Self> {
        let t = Self { zoom, x, y, offset };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.zoom > MAX_TILE_ZOOM {
            return Err(Error::InvalidTile(format!("zoom {} out of range", self.zoom)));
        }
        let n = 1i64 << self.zoom;
        let (sx, sy) = self.offset.shift();
        let lo = |s: f64| if s > 0.0 { -1 } else { 0 };
        if self.x < lo(sx) || self.x >= n || self.y < lo(sy) || self.y >= n {
            return Err(Error::InvalidTile(format!(
                "({}, {}) outside zoom {} grid with offset {:?}",
                self.x, self.y, self.zoom, self.offset
            )));
        }
        Ok(())
    }

    /// Mercator-plane extent `(x0, y0, x1, y1)`.
    fn extent(&self) -> (f64, f64, f64, f64) {
        let n = (1u64 << self.zoom) as f64;
        let (sx, sy) = self.offset.shift();
        let x0 = ((self.x as f64 + sx) / n).max(0.0);
        let x1 = ((self.x as f64 + sx + 1.0) / n).min(1.0);
        let y0 = ((self.y as f64 + sy) / n).max(0.0);
        let y1 = ((self.y as f64 + sy + 1.0) / n).min(1.0);
        (x0, y0, x1, y1)
    }
}

/// Footprint of a tile, corners NW, NE, SE, SW.
pub fn tile_footprint(tile: &TileId) -> Result<Footprint> {
    tile.validate()?;
    let (x0, y0, x1, y1) = tile.extent();
    let west = x0 * 360.0 - 180.0;
    let east = x1 * 360.0 - 180.0;
    let north = merc_y_to_lat(y0).clamp(-MAX_LAT, MAX_LAT);
    let south = merc_y_to_lat(y1).clamp(-MAX_LAT, MAX_LAT);
    Footprint::from_bounds(south, west, north, east)
}

/// The four tiles (one per grid offset) containing `p` at `zoom`.
///
/// A point on a tile edge belongs to the tile to its east/south.
pub fn covering_tiles(p: &GeoPoint, zoom: u8) -> Result<[TileId; 4]> {
    if zoom > MAX_TILE_ZOOM {
        return Err(Error::InvalidTile(format!("zoom {zoom} out of range")));
    }
    let p = GeoPoint::wrapped(p.lat, p.lon)?;
    let m = p.mercator();
    let n = 1i64 << zoom;
    let index = |v: f64, s: f64| -> i64 {
        let i = (v * n as f64 - s).floor() as i64;
        i.clamp(if s > 0.0 { -1 } else { 0 }, n - 1)
    };
    Ok(TileOffset::ALL.map(|offset| {
        let (sx, sy) = offset.shift();
        TileId {
            zoom,
            x: index(m.x, sx),
            y: index(m.y, sy),
            offset,
        }
    }))
}

/// Every (tile, rotation) that could hold a positive for a weak label:
/// zooms × 4 covering tiles × 4 rotations.
pub fn candidate_positives(weak: &GeoPoint, zooms: &[u8]) -> Result<Vec<(TileId, Rotation)>> {
    let mut out = Vec::with_capacity(zooms.len() * 16);
    for &z in zooms {
        for tile in covering_tiles(weak, z)? {
            for rot in Rotation::ALL {
                let entry = (tile, rot);
                if !out.contains(&entry) {
                    out.push(entry);
                }
            }
        }
    }
    Ok(out)
}

/// Indices of footprints whose centroid lies within `radius_km` of `nadir`.
pub fn region_filter(nadir: &GeoPoint, db: &[Footprint], radius_km: f64) -> Vec<usize> {
    db.iter()
        .enumerate()
        .filter(|(_, f)| great_circle_km(nadir, &f.centroid()) <= radius_km)
        .map(|(i, _)| i)
        .collect()
}

/// One line of the footprint ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FootprintRecord {
    pub id: String,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<u8>,
    pub corners: [[f64; 2]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl FootprintRecord {
    pub fn footprint(&self) -> Result<Footprint> {
        Footprint::from_latlon(self.corners)
    }
}

/// Parses line-delimited footprint records, validating every footprint.
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn read_footprint_records<R: BufRead>(reader: R) -> Result<Vec<FootprintRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format {
            line: i + 1,
            message,
        };
        let rec: FootprintRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        rec.footprint()
            .map_err(|e| fail(format!("record {:?}: {e}", rec.id)))?;
        if let Some([lat, lon]) = rec.weak {
            GeoPoint::new(lat, lon).map_err(|e| fail(format!("record {:?}: weak label: {e}", rec.id)))?;
        }
        out.push(rec);
    }
    Ok(out)
}
