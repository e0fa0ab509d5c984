//! Synthetic referring-video corpus: rendered shape scenes with exact masks,
//! role-structured expressions, contrasting pair selection, and spatial or
//! temporal concatenation.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FRAME_MAGIC: &[u8; 5] = b"LCFR1";
const MASK_MAGIC: &[u8; 5] = b"LCMK1";
const SUPERSAMPLE: usize = 4;
const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.1];

pub fn standard_vocabulary() -> Vocabulary {
    let mut words = vec![
        "the", "that", "moving", "left", "right", "up", "down", "resting", "falls", "later", "on",
    ];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    Vocabulary::new(&words).expect("static vocabulary")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // apex up, base at 0.75 r below the centre
                let top = -r;
                let base = 0.75 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half = 0.95 * r * (dy - top) / (base - top);
                dx.abs() <= half
            }
        }
    }

    /// Radius of a disc enclosing the shape.
    fn bound(self, r: f64) -> f64 {
        match self {
            Shape::Circle | Shape::Triangle => r,
            Shape::Square => 0.85 * std::f64::consts::SQRT_2 * r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.15],
            Color::Magenta => [0.9, 0.2, 0.85],
            Color::Cyan => [0.15, 0.85, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    Left,
    Right,
    Up,
    Down,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::Left, Dir::Right, Dir::Up, Dir::Down];

    fn word(self) -> &'static str {
        match self {
            Dir::Left => "left",
            Dir::Right => "right",
            Dir::Up => "up",
            Dir::Down => "down",
        }
    }

    fn unit(self) -> (f64, f64) {
        match self {
            Dir::Left => (-1.0, 0.0),
            Dir::Right => (1.0, 0.0),
            Dir::Up => (0.0, -1.0),
            Dir::Down => (0.0, 1.0),
        }
    }

    fn mirrored(self) -> Self {
        match self {
            Dir::Left => Dir::Right,
            Dir::Right => Dir::Left,
            d => d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    fn mirrored(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Whole-video behaviour of an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verb {
    Moving(Dir),
    Resting,
    /// Hovers, then drops after the event frame.
    Falls,
}

impl Verb {
    fn phrase(self) -> String {
        match self {
            Verb::Moving(d) => format!("moving {}", d.word()),
            Verb::Resting => "resting".into(),
            Verb::Falls => "that falls".into(),
        }
    }

    fn mirrored(self) -> Self {
        match self {
            Verb::Moving(d) => Verb::Moving(d.mirrored()),
            v => v,
        }
    }
}

/// Describable attributes of one object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectAttrs {
    pub color: Color,
    pub shape: Shape,
    pub verb: Verb,
    /// Image half for resting objects that sit clearly off-centre.
    pub side: Option<Side>,
}

impl ObjectAttrs {
    pub fn mirrored(self) -> Self {
        Self {
            verb: self.verb.mirrored(),
            side: self.side.map(Side::mirrored),
            ..self
        }
    }
}

/// A referring description: every `Some` field must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Description {
    pub color: Option<Color>,
    pub shape: Shape,
    pub verb: Verb,
    pub side: Option<Side>,
}

impl Description {
    pub fn matches(&self, o: &ObjectAttrs) -> bool {
        self.shape == o.shape
            && self.verb == o.verb
            && self.color.is_none_or(|c| c == o.color)
            && self.side.is_none_or(|s| o.side == Some(s))
    }

    pub fn mirrored(self) -> Self {
        Self {
            verb: self.verb.mirrored(),
            side: self.side.map(Side::mirrored),
            ..self
        }
    }

    pub fn roles(&self) -> RoleStruct {
        let arg0 = match self.color {
            Some(c) => format!("the {} {}", c.word(), self.shape.word()),
            None => format!("the {}", self.shape.word()),
        };
        let mut pairs = vec![(arg0, Role::Arg0), (self.verb.phrase(), Role::Verb)];
        if let Some(s) = self.side {
            pairs.push((format!("on the {}", s.word()), Role::Loc));
        }
        if self.verb == Verb::Falls {
            pairs.push(("later".into(), Role::Tmp));
        }
        RoleStruct { pairs }
    }

    pub fn text(&self) -> String {
        self.roles().text()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Arg0,
    Verb,
    Arg1,
    Loc,
    Tmp,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Arg0 => "ARG0",
            Role::Verb => "Verb",
            Role::Arg1 => "ARG1",
            Role::Loc => "ARGM-LOC",
            Role::Tmp => "ARGM-TMP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ARG0" => Role::Arg0,
            "Verb" => Role::Verb,
            "ARG1" => Role::Arg1,
            "ARGM-LOC" => Role::Loc,
            "ARGM-TMP" => Role::Tmp,
            _ => return Err(Error::Format(format!("unknown role {s}"))),
        })
    }
}

/// Ordered `(phrase, role)` decomposition of an expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleStruct {
    pub pairs: Vec<(String, Role)>,
}

impl RoleStruct {
    pub fn validate(&self) -> Result<()> {
        let arg0 = self.pairs.iter().filter(|(_, r)| *r == Role::Arg0).count();
        let verbs = self.pairs.iter().filter(|(_, r)| *r == Role::Verb).count();
        if arg0 != 1 || verbs == 0 {
            return Err(Error::Format(format!(
                "role structure needs one ARG0 and a Verb, got {arg0} and {verbs}"
            )));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        let words: Vec<&str> = self.pairs.iter().map(|(p, _)| p.as_str()).collect();
        words.join(" ")
    }

    /// Shares at least one realization with `other` without being identical.
    pub fn contrasts_with(&self, other: &RoleStruct) -> bool {
        let shared = self.pairs.iter().any(|p| other.pairs.contains(p));
        let same = self.pairs.len() == other.pairs.len()
            && self.pairs.iter().all(|p| other.pairs.contains(p));
        shared && !same
    }

    fn mirrored(&self) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|(p, r)| (swap_sides(p), *r))
                .collect(),
        }
    }

    fn encode(&self) -> String {
        let parts: Vec<String> = self
            .pairs
            .iter()
            .map(|(p, r)| format!("{p}|{}", r.label()))
            .collect();
        parts.join(";")
    }

    fn decode(s: &str) -> Result<Self> {
        let pairs = s
            .split(';')
            .map(|item| {
                let (p, r) = item
                    .split_once('|')
                    .ok_or_else(|| Error::Format(format!("bad role item {item}")))?;
                Ok((p.to_string(), Role::parse(r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let rs = Self { pairs };
        rs.validate()?;
        Ok(rs)
    }
}

impl fmt::Display for RoleStruct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .pairs
            .iter()
            .map(|(p, r)| format!("({p}, {})", r.label()))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Swaps the words `left` and `right`.
pub fn swap_sides(text: &str) -> String {
    let words: Vec<&str> = text
        .split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            w => w,
        })
        .collect();
    words.join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Single,
    SpatialConcat,
    TemporalConcat,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Single => "single",
            Provenance::SpatialConcat => "spatial-concat",
            Provenance::TemporalConcat => "temporal-concat",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Provenance::Single,
            "spatial-concat" => Provenance::SpatialConcat,
            "temporal-concat" => Provenance::TemporalConcat,
            _ => return Err(Error::Format(format!("unknown provenance {s}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub objects: Vec<ObjectAttrs>,
    /// Objects belonging to the query half; the rest came from a partner.
    pub query_objects: usize,
    pub event_frame: Option<usize>,
    pub provenance: Provenance,
    pub description: Description,
}

/// Frames `[H, W, C]` with values exactly representable in `f32`, and
/// row-major `H * W` masks.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
    pub expression: Vec<usize>,
    pub roles: RoleStruct,
    pub meta: SampleMeta,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Objects translating or resting.
    Motion,
    /// Twin objects hover side by side; one drops halfway through.
    Falls,
    /// Either, chosen per sample.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub kind: SceneKind,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 3,
            frames: 16,
            min_objects: 2,
            max_objects: 5,
            min_radius: 6.0,
            max_radius: 9.0,
            kind: SceneKind::Mixed,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 && self.channels != 1 {
            return Err(Error::Config("scenes render 1 or 3 channels".into()));
        }
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty scene".into()));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("radius range is empty".into()));
        }
        if self.kind != SceneKind::Motion && (self.frames < 3 || self.min_objects < 2) {
            return Err(Error::Config(
                "fall scenes need at least 3 frames and 2 objects".into(),
            ));
        }
        Ok(())
    }

    pub fn event_frame(&self) -> usize {
        self.frames / 2
    }
}

/// Motion script of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectScript {
    pub attrs: ObjectAttrs,
    pub radius: f64,
    pub x0: f64,
    pub y0: f64,
    pub speed: f64,
    /// Frame after which a falling object starts to drop.
    pub event: Option<usize>,
}

impl ObjectScript {
    pub fn position(&self, t: usize) -> (f64, f64) {
        match self.attrs.verb {
            Verb::Moving(d) => {
                let (ux, uy) = d.unit();
                let s = self.speed * t as f64;
                (self.x0 + ux * s, self.y0 + uy * s)
            }
            Verb::Resting => (self.x0, self.y0),
            Verb::Falls => {
                let e = self.event.unwrap_or(0);
                let drop = if t > e { self.speed * (t - e) as f64 } else { 0.0 };
                (self.x0, self.y0 + drop)
            }
        }
    }

    fn travel(&self, frames: usize) -> f64 {
        match self.attrs.verb {
            Verb::Resting => 0.0,
            Verb::Moving(_) => self.speed * (frames - 1) as f64,
            Verb::Falls => self.speed * (frames - 1 - self.event.unwrap_or(0)) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneScript {
    pub objects: Vec<ObjectScript>,
    pub referent: usize,
    pub description: Description,
}

fn side_of(x: f64, r: f64, width: usize) -> Option<Side> {
    let mid = (width as f64 - 1.0) / 2.0;
    if x + r < mid {
        Some(Side::Left)
    } else if x - r > mid {
        Some(Side::Right)
    } else {
        None
    }
}

/// Smallest description that singles out `referent` among `objects`.
pub fn describe(objects: &[ObjectAttrs], referent: usize) -> Option<Description> {
    let o = objects[referent];
    let candidates = [
        (None, None),
        (Some(o.color), None),
        (None, o.side),
        (Some(o.color), o.side),
    ];
    candidates.iter().find_map(|&(color, side)| {
        let d = Description {
            color,
            shape: o.shape,
            verb: o.verb,
            side,
        };
        (objects.iter().filter(|x| d.matches(x)).count() == 1).then_some(d)
    })
}

fn overlaps(a: &ObjectScript, b: &ObjectScript, frames: usize) -> bool {
    let gap = a.attrs.shape.bound(a.radius) + b.attrs.shape.bound(b.radius) + 1.0;
    (0..frames).any(|t| {
        let (ax, ay) = a.position(t);
        let (bx, by) = b.position(t);
        (ax - bx).powi(2) + (ay - by).powi(2) < gap * gap
    })
}

fn random_object<R: Rng>(rng: &mut R, cfg: &SceneConfig, verb: Verb, attrs: Option<(Color, Shape, f64)>) -> Option<ObjectScript> {
    let (color, shape, radius) = attrs.unwrap_or_else(|| {
        (
            *Color::ALL.choose(rng).expect("colors"),
            *Shape::ALL.choose(rng).expect("shapes"),
            rng.random_range(cfg.min_radius..=cfg.max_radius),
        )
    });
    let speed = match verb {
        Verb::Resting => 0.0,
        Verb::Moving(_) => rng.random_range(1.0..2.0),
        Verb::Falls => rng.random_range(2.0..3.0),
    };
    let mut s = ObjectScript {
        attrs: ObjectAttrs {
            color,
            shape,
            verb,
            side: None,
        },
        radius,
        x0: 0.0,
        y0: 0.0,
        speed,
        event: (verb == Verb::Falls).then(|| cfg.event_frame()),
    };
    let b = shape.bound(radius);
    let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);
    let travel = s.travel(cfg.frames);
    let (dx, dy) = match verb {
        Verb::Moving(d) => d.unit(),
        Verb::Falls => (0.0, 1.0),
        Verb::Resting => (0.0, 0.0),
    };
    let span = |lo: f64, hi: f64, shift: f64| -> Option<(f64, f64)> {
        let (a, b) = if shift >= 0.0 { (lo, hi - shift) } else { (lo - shift, hi) };
        (a <= b).then_some((a, b))
    };
    let (xa, xb) = span(b, w - b, dx * travel)?;
    let (ya, yb) = span(b, h - b, dy * travel)?;
    // whole-pixel centres keep twins congruent
    if xa.ceil() > xb.floor() {
        return None;
    }
    s.x0 = rng.random_range(xa.ceil()..=xb.floor()).round();
    s.y0 = rng.random_range(ya..=yb);
    if verb == Verb::Resting {
        s.attrs.side = side_of(s.x0, b, cfg.width);
    }
    Some(s)
}

fn random_verb<R: Rng>(rng: &mut R) -> Verb {
    if rng.random_bool(0.3) {
        Verb::Resting
    } else {
        Verb::Moving(*Dir::ALL.choose(rng).expect("dirs"))
    }
}

const MAX_TRIES: usize = 400;

fn place<R: Rng>(rng: &mut R, cfg: &SceneConfig, placed: &[ObjectScript], verb: Verb, attrs: Option<(Color, Shape, f64)>) -> Option<ObjectScript> {
    (0..MAX_TRIES).find_map(|_| {
        let o = random_object(rng, cfg, verb, attrs)?;
        (!placed.iter().any(|p| overlaps(p, &o, cfg.frames))).then_some(o)
    })
}

fn motion_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig, n: usize) -> Option<SceneScript> {
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let verb = random_verb(rng);
        objects.push(place(rng, cfg, &objects, verb, None)?);
    }
    let attrs: Vec<ObjectAttrs> = objects.iter().map(|o| o.attrs).collect();
    let referent = rng.random_range(0..n);
    let description = describe(&attrs, referent)?;
    Some(SceneScript {
        objects,
        referent,
        description,
    })
}

fn falls_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig, n: usize) -> Option<SceneScript> {
    let color = *Color::ALL.choose(rng).expect("colors");
    let shape = *Shape::ALL.choose(rng).expect("shapes");
    let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let faller = place(rng, cfg, &[], Verb::Falls, Some((color, shape, radius)))?;
    let b = shape.bound(radius);
    // the twin hovers at the same height, a whole number of pixels away
    let twin = (0..MAX_TRIES).find_map(|_| {
        let x = rng.random_range(b..=cfg.width as f64 - 1.0 - b).floor().max(b.ceil());
        let mut t = ObjectScript {
            attrs: ObjectAttrs {
                color,
                shape,
                verb: Verb::Resting,
                side: side_of(x, b, cfg.width),
            },
            radius,
            x0: x,
            y0: faller.y0,
            speed: 0.0,
            event: None,
        };
        t.x0 = x;
        (x + b <= cfg.width as f64 - 1.0 && !overlaps(&faller, &t, cfg.frames)).then_some(t)
    })?;
    let mut objects = vec![faller, twin];
    while objects.len() < n {
        let verb = random_verb(rng);
        objects.push(place(rng, cfg, &objects, verb, None)?);
    }
    // shuffle so the referent index carries no information
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..objects.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    };
    let objects: Vec<ObjectScript> = order.iter().map(|&i| objects[i]).collect();
    let referent = order.iter().position(|&i| i == 0).expect("faller");
    let attrs: Vec<ObjectAttrs> = objects.iter().map(|o| o.attrs).collect();
    let description = describe(&attrs, referent)?;
    Some(SceneScript {
        objects,
        referent,
        description,
    })
}

/// Draws a scene script for one sample.
pub fn script<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Result<SceneScript> {
    cfg.validate()?;
    let falls = match cfg.kind {
        SceneKind::Motion => false,
        SceneKind::Falls => true,
        SceneKind::Mixed => rng.random_bool(0.5),
    };
    for _ in 0..MAX_TRIES {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let s = if falls {
            falls_scene(rng, cfg, n)
        } else {
            motion_scene(rng, cfg, n)
        };
        if let Some(s) = s {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "could not place {}..={} objects of radius {}..={} on a {}x{} canvas",
        cfg.min_objects, cfg.max_objects, cfg.min_radius, cfg.max_radius, cfg.width, cfg.height
    )))
}

/// Per-pixel coverage of one object in `[0, 1]` from supersampling.
fn coverage(o: &ObjectScript, t: usize, width: usize, height: usize) -> Vec<(usize, f64)> {
    let (cx, cy) = o.position(t);
    let b = o.attrs.shape.bound(o.radius) + 1.0;
    let x0 = (cx - b).floor().max(0.0) as usize;
    let x1 = ((cx + b).ceil() as usize).min(width - 1);
    let y0 = (cy - b).floor().max(0.0) as usize;
    let y1 = ((cy + b).ceil() as usize).min(height - 1);
    let n = SUPERSAMPLE * SUPERSAMPLE;
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    if o.attrs.shape.contains(px - cx, py - cy, o.radius) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                out.push((y * width + x, hits as f64 / n as f64));
            }
        }
    }
    out
}

/// Renders frames and referent masks; a pixel belongs to the mask when at
/// least half its subsamples fall inside the referent.
pub fn render(s: &SceneScript, cfg: &SceneConfig) -> (Vec<Tensor>, Vec<Vec<bool>>) {
    let (w, h, c) = (cfg.width, cfg.height, cfg.channels);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut data = vec![0.0; h * w * c];
        for px in data.chunks_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = if c == 3 { BACKGROUND[ch] } else { BACKGROUND[0] };
            }
        }
        let mut mask = vec![false; h * w];
        for (i, o) in s.objects.iter().enumerate() {
            let rgb = o.attrs.color.rgb();
            let gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            for (p, a) in coverage(o, t, w, h) {
                for ch in 0..c {
                    let col = if c == 3 { rgb[ch] } else { gray };
                    let v = &mut data[p * c + ch];
                    *v = *v * (1.0 - a) + col * a;
                }
                if i == s.referent && a >= 0.5 {
                    mask[p] = true;
                }
            }
        }
        let mut frame = Tensor::new(vec![h, w, c], data).expect("frame shape");
        frame.quantize_f32();
        frames.push(frame);
        masks.push(mask);
    }
    (frames, masks)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` samples; sample `i` draws from its own stream of
/// `seed`.
pub fn generate(count: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<VideoSample>> {
    if count == 0 {
        return Err(Error::Input("sample count must be >= 1".into()));
    }
    cfg.validate()?;
    let vocab = standard_vocabulary();
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let s = script(&mut rng, cfg)?;
            Ok(from_script(&s, cfg, &vocab))
        })
        .collect()
}

pub fn from_script(s: &SceneScript, cfg: &SceneConfig, vocab: &Vocabulary) -> VideoSample {
    let (frames, masks) = render(s, cfg);
    let roles = s.description.roles();
    let event_frame = s.objects[s.referent].event;
    VideoSample {
        frames,
        masks,
        expression: vocab.encode(&roles.text()),
        roles,
        meta: SampleMeta {
            objects: s.objects.iter().map(|o| o.attrs).collect(),
            query_objects: s.objects.len(),
            event_frame,
            provenance: Provenance::Single,
            description: s.description,
        },
    }
}

/// Pairs each sample with the first later sample (cyclically) whose roles
/// share some but not all realizations and whose objects do not also match
/// the query description.
pub fn contrast_sample(samples: &[VideoSample]) -> Result<Vec<(usize, usize)>> {
    if samples.len() < 2 {
        return Err(Error::Input("contrasting needs at least two samples".into()));
    }
    let n = samples.len();
    let mut pairs = Vec::new();
    for (i, q) in samples.iter().enumerate() {
        let partner = (1..n).map(|k| (i + k) % n).find(|&j| {
            let p = &samples[j];
            q.roles.contrasts_with(&p.roles)
                && !p.meta.objects.iter().any(|o| q.meta.description.matches(o))
        });
        match partner {
            Some(j) => pairs.push((i, j)),
            None => log::warn!("sample {i} has no eligible contrast partner; skipped"),
        }
    }
    Ok(pairs)
}

/// Bilinear resize of an `[H, W, C]` frame, rounded through `f32`.
pub fn resize_frame(frame: &Tensor, height: usize, width: usize) -> Tensor {
    let s = frame.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return frame.clone();
    }
    let src = frame.data();
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, inp as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; height * width * c];
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * width + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let mut t = Tensor::new(vec![height, width, c], out).expect("resized frame");
    t.quantize_f32();
    t
}

/// Fits a video to `n` frames by truncating or repeating the last frame.
fn fit_duration(frames: &[Tensor], n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|t| frames[t.min(frames.len() - 1)].clone())
        .collect()
}

fn check_pair(query: &VideoSample, partner: &VideoSample) -> Result<()> {
    if query.is_empty() || partner.is_empty() {
        return Err(Error::Input("cannot concatenate an empty video".into()));
    }
    if query.dims().2 != partner.dims().2 {
        return Err(Error::Input("channel counts differ".into()));
    }
    Ok(())
}

fn merged_meta(query: &VideoSample, partner: &VideoSample, provenance: Provenance) -> SampleMeta {
    let mut objects = query.meta.objects.clone();
    objects.extend_from_slice(&partner.meta.objects);
    SampleMeta {
        objects,
        query_objects: query.meta.query_objects,
        event_frame: query.meta.event_frame,
        provenance,
        description: query.meta.description,
    }
}

/// Query on the left, partner resized to the query height on the right.
pub fn concat_spatial(query: &VideoSample, partner: &VideoSample) -> Result<VideoSample> {
    check_pair(query, partner)?;
    let (h, wq, c) = query.dims();
    let (hp, wp, _) = partner.dims();
    let wr = ((wp as f64 * h as f64 / hp as f64).round() as usize).max(1);
    let resized: Vec<Tensor> = partner.frames.iter().map(|f| resize_frame(f, h, wr)).collect();
    let resized = fit_duration(&resized, query.len());
    let w = wq + wr;
    let mut frames = Vec::with_capacity(query.len());
    let mut masks = Vec::with_capacity(query.len());
    for (qf, (pf, qm)) in query.frames.iter().zip(resized.iter().zip(&query.masks)) {
        let mut data = Vec::with_capacity(h * w * c);
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend_from_slice(&qf.data()[y * wq * c..(y + 1) * wq * c]);
            data.extend_from_slice(&pf.data()[y * wr * c..(y + 1) * wr * c]);
            mask.extend_from_slice(&qm[y * wq..(y + 1) * wq]);
            mask.extend(std::iter::repeat_n(false, wr));
        }
        frames.push(Tensor::new(vec![h, w, c], data)?);
        masks.push(mask);
    }
    Ok(VideoSample {
        frames,
        masks,
        expression: query.expression.clone(),
        roles: query.roles.clone(),
        meta: merged_meta(query, partner, Provenance::SpatialConcat),
    })
}

/// Query frames followed by the partner's, resized to the query resolution,
/// with empty masks over the partner half.
pub fn concat_temporal(query: &VideoSample, partner: &VideoSample) -> Result<VideoSample> {
    check_pair(query, partner)?;
    let (h, w, _) = query.dims();
    let n = query.len();
    let resized: Vec<Tensor> = partner.frames.iter().map(|f| resize_frame(f, h, w)).collect();
    let mut frames = query.frames.clone();
    frames.extend(fit_duration(&resized, n));
    let mut masks = query.masks.clone();
    masks.extend(std::iter::repeat_n(vec![false; h * w], n));
    Ok(VideoSample {
        frames,
        masks,
        expression: query.expression.clone(),
        roles: query.roles.clone(),
        meta: merged_meta(query, partner, Provenance::TemporalConcat),
    })
}

/// Mirror about the vertical axis, swapping left and right in the
/// expression, roles and object attributes.
pub fn mirror(sample: &VideoSample, vocab: &Vocabulary) -> Result<VideoSample> {
    let (h, w, c) = sample.dims();
    let frames = sample
        .frames
        .iter()
        .map(|f| {
            let src = f.data();
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let s = (y * w + x) * c;
                    let d = (y * w + (w - 1 - x)) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
            Tensor::new(vec![h, w, c], out)
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = sample
        .masks
        .iter()
        .map(|m| {
            let mut out = vec![false; m.len()];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + (w - 1 - x)] = m[y * w + x];
                }
            }
            out
        })
        .collect();
    let (left, right) = (vocab.id("left"), vocab.id("right"));
    let expression = sample
        .expression
        .iter()
        .map(|&i| match i {
            i if i == left => right,
            i if i == right => left,
            i => i,
        })
        .collect();
    let mut meta = sample.meta.clone();
    meta.objects = meta.objects.iter().map(|o| o.mirrored()).collect();
    meta.description = meta.description.mirrored();
    Ok(VideoSample {
        frames,
        masks,
        expression,
        roles: sample.roles.mirrored(),
        meta,
    })
}

fn attrs_text(o: &ObjectAttrs) -> String {
    let verb = match o.verb {
        Verb::Moving(d) => format!("moving-{}", d.word()),
        Verb::Resting => "resting".into(),
        Verb::Falls => "falls".into(),
    };
    let side = o.side.map_or("-", Side::word);
    format!("{} {} {verb} {side}", o.color.word(), o.shape.word())
}

fn parse_color(s: &str) -> Result<Color> {
    Color::ALL
        .into_iter()
        .find(|c| c.word() == s)
        .ok_or_else(|| Error::Format(format!("unknown colour {s}")))
}

fn parse_shape(s: &str) -> Result<Shape> {
    Shape::ALL
        .into_iter()
        .find(|c| c.word() == s)
        .ok_or_else(|| Error::Format(format!("unknown shape {s}")))
}

fn parse_side(s: &str) -> Result<Option<Side>> {
    Ok(match s {
        "-" => None,
        "left" => Some(Side::Left),
        "right" => Some(Side::Right),
        _ => return Err(Error::Format(format!("unknown side {s}"))),
    })
}

fn parse_verb(s: &str) -> Result<Verb> {
    Ok(match s {
        "resting" => Verb::Resting,
        "falls" => Verb::Falls,
        _ => {
            let d = s
                .strip_prefix("moving-")
                .and_then(|d| Dir::ALL.into_iter().find(|x| x.word() == d))
                .ok_or_else(|| Error::Format(format!("unknown verb {s}")))?;
            Verb::Moving(d)
        }
    })
}

fn parse_attrs(s: &str) -> Result<ObjectAttrs> {
    let f: Vec<&str> = s.split_whitespace().collect();
    if f.len() != 4 {
        return Err(Error::Format(format!("bad object line {s}")));
    }
    Ok(ObjectAttrs {
        color: parse_color(f[0])?,
        shape: parse_shape(f[1])?,
        verb: parse_verb(f[2])?,
        side: parse_side(f[3])?,
    })
}

fn description_text(d: &Description) -> String {
    let color = d.color.map_or("-", Color::word);
    let verb = attrs_text(&ObjectAttrs {
        color: Color::Red,
        shape: d.shape,
        verb: d.verb,
        side: d.side,
    });
    let mut parts = verb.split_whitespace().skip(1);
    let shape = parts.next().unwrap_or_default();
    let verb = parts.next().unwrap_or_default();
    let side = parts.next().unwrap_or_default();
    format!("{color} {shape} {verb} {side}")
}

fn parse_description(s: &str) -> Result<Description> {
    let f: Vec<&str> = s.split_whitespace().collect();
    if f.len() != 4 {
        return Err(Error::Format(format!("bad description {s}")));
    }
    Ok(Description {
        color: if f[0] == "-" { None } else { Some(parse_color(f[0])?) },
        shape: parse_shape(f[1])?,
        verb: parse_verb(f[2])?,
        side: parse_side(f[3])?,
    })
}

fn write_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn read_u32(buf: &[u8], at: &mut usize) -> Result<usize> {
    let bytes = buf
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")) as usize)
}

pub fn encode_frames(frames: &[Tensor]) -> Result<Vec<u8>> {
    let (h, w, c) = match frames.first().map(Tensor::shape) {
        Some(&[h, w, c]) => (h, w, c),
        _ => return Err(Error::Input("no frames to write".into())),
    };
    let mut out = Vec::with_capacity(21 + frames.len() * h * w * c * 4);
    out.extend_from_slice(FRAME_MAGIC);
    for v in [frames.len(), h, w, c] {
        write_u32(&mut out, v)?;
    }
    for f in frames {
        if f.shape() != [h, w, c] {
            return Err(Error::Input("frames differ in shape".into()));
        }
        for &v in f.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_frames(buf: &[u8]) -> Result<Vec<Tensor>> {
    if buf.get(..5) != Some(FRAME_MAGIC.as_slice()) {
        return Err(Error::Format("frames file lacks the LCFR1 header".into()));
    }
    let mut at = 5;
    let n = read_u32(buf, &mut at)?;
    let (h, w, c) = (read_u32(buf, &mut at)?, read_u32(buf, &mut at)?, read_u32(buf, &mut at)?);
    let per = h * w * c;
    if buf.len() != at + n * per * 4 {
        return Err(Error::Format("frames payload length mismatch".into()));
    }
    (0..n)
        .map(|i| {
            let start = at + i * per * 4;
            let data = buf[start..start + per * 4]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            Tensor::new(vec![h, w, c], data)
        })
        .collect()
}

/// Packed masks, least significant bit first, one padded byte run per frame.
pub fn encode_masks(masks: &[Vec<bool>], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    for v in [masks.len(), height, width] {
        write_u32(&mut out, v)?;
    }
    for m in masks {
        if m.len() != height * width {
            return Err(Error::Input("mask size mismatch".into()));
        }
        for chunk in m.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |b, (i, &on)| b | (u8::from(on) << i));
            out.push(byte);
        }
    }
    Ok(out)
}

pub fn decode_masks(buf: &[u8]) -> Result<(Vec<Vec<bool>>, usize, usize)> {
    if buf.get(..5) != Some(MASK_MAGIC.as_slice()) {
        return Err(Error::Format("mask file lacks the LCMK1 header".into()));
    }
    let mut at = 5;
    let n = read_u32(buf, &mut at)?;
    let (h, w) = (read_u32(buf, &mut at)?, read_u32(buf, &mut at)?);
    let per = (h * w).div_ceil(8);
    if buf.len() != at + n * per {
        return Err(Error::Format("mask payload length mismatch".into()));
    }
    let masks = (0..n)
        .map(|i| {
            let bytes = &buf[at + i * per..at + (i + 1) * per];
            (0..h * w).map(|p| bytes[p / 8] >> (p % 8) & 1 == 1).collect()
        })
        .collect();
    Ok((masks, h, w))
}

fn meta_text(s: &VideoSample, vocab: &Vocabulary) -> Result<String> {
    let mut t = String::new();
    t.push_str(&format!("expression: {}\n", vocab.decode(&s.expression)?));
    let ids: Vec<String> = s.expression.iter().map(usize::to_string).collect();
    t.push_str(&format!("ids: {}\n", ids.join(" ")));
    t.push_str(&format!("roles: {}\n", s.roles.encode()));
    t.push_str(&format!("description: {}\n", description_text(&s.meta.description)));
    let ev = s.meta.event_frame.map_or("-".to_string(), |e| e.to_string());
    t.push_str(&format!("event_frame: {ev}\n"));
    t.push_str(&format!("provenance: {}\n", s.meta.provenance.label()));
    t.push_str(&format!("query_objects: {}\n", s.meta.query_objects));
    for o in &s.meta.objects {
        t.push_str(&format!("object: {}\n", attrs_text(o)));
    }
    Ok(t)
}

fn parse_meta(text: &str) -> Result<(Vec<usize>, RoleStruct, SampleMeta)> {
    let mut ids = None;
    let mut roles = None;
    let mut description = None;
    let mut event = None;
    let mut provenance = None;
    let mut query_objects = None;
    let mut objects = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::Format(format!("bad meta line {line}")))?;
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad number {s}")))
        };
        match k {
            "expression" => {}
            "ids" => ids = Some(v.split_whitespace().map(num).collect::<Result<Vec<_>>>()?),
            "roles" => roles = Some(RoleStruct::decode(v)?),
            "description" => description = Some(parse_description(v)?),
            "event_frame" => event = Some(if v == "-" { None } else { Some(num(v)?) }),
            "provenance" => provenance = Some(Provenance::parse(v)?),
            "query_objects" => query_objects = Some(num(v)?),
            "object" => objects.push(parse_attrs(v)?),
            _ => return Err(Error::Format(format!("unknown meta key {k}"))),
        }
    }
    let missing = |what: &str| Error::Format(format!("meta lacks {what}"));
    Ok((
        ids.ok_or_else(|| missing("ids"))?,
        roles.ok_or_else(|| missing("roles"))?,
        SampleMeta {
            objects,
            query_objects: query_objects.ok_or_else(|| missing("query_objects"))?,
            event_frame: event.ok_or_else(|| missing("event_frame"))?,
            provenance: provenance.ok_or_else(|| missing("provenance"))?,
            description: description.ok_or_else(|| missing("description"))?,
        },
    ))
}

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:05}")
}

pub fn write_sample(dir: &Path, s: &VideoSample, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w, _) = s.dims();
    fs::File::create(dir.join("frames.bin"))?.write_all(&encode_frames(&s.frames)?)?;
    fs::File::create(dir.join("masks.bin"))?.write_all(&encode_masks(&s.masks, h, w)?)?;
    fs::write(dir.join("meta.txt"), meta_text(s, vocab)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<VideoSample> {
    let mut buf = Vec::new();
    fs::File::open(dir.join("frames.bin"))?.read_to_end(&mut buf)?;
    let frames = decode_frames(&buf)?;
    buf.clear();
    fs::File::open(dir.join("masks.bin"))?.read_to_end(&mut buf)?;
    let (masks, h, w) = decode_masks(&buf)?;
    if masks.len() != frames.len() || frames.first().is_some_and(|f| f.shape()[..2] != [h, w]) {
        return Err(Error::Format(format!("{}: frames and masks disagree", dir.display())));
    }
    let (expression, roles, meta) = parse_meta(&fs::read_to_string(dir.join("meta.txt"))?)?;
    Ok(VideoSample {
        frames,
        masks,
        expression,
        roles,
        meta,
    })
}

/// Writes `vocab.txt` and one `sample_NNNNN` directory per sample.
pub fn write_dataset(dir: &Path, samples: &[VideoSample], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    vocab.save(&dir.join("vocab.txt"))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(&dir.join(sample_dir_name(i)), s, vocab)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<VideoSample>, Vocabulary)> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("sample_"))
        .collect();
    names.sort();
    let samples = names
        .iter()
        .map(|n| read_sample(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", dir.display())));
    }
    Ok((samples, vocab))
}
