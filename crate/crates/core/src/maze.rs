//! Procedural two-room maze, scripted loop policy, egocentric renderer and
//! the binary episode store.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use memstream_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{verify_crc, Reader};
use crate::error::{contract, Error, IoContext, Result};

pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];
pub const FLOOR: [u8; 3] = [64, 64, 64];
pub const VOID: [u8; 3] = [0, 0, 0];
pub const AGENT: [u8; 3] = [255, 255, 255];

/// Side of the egocentric crop in cells.
pub const VIEW: usize = 9;
/// Rendered frame side in pixels.
pub const FRAME: usize = 32;

const WIDTH: u16 = 13;
const HEIGHT: u16 = 7;
const LAP_RANGE: std::ops::RangeInclusive<usize> = 12..=20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Action {
    Forward = 0,
    TurnLeft = 1,
    TurnRight = 2,
    Stay = 3,
}

impl Action {
    pub const COUNT: usize = 4;

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Forward),
            1 => Some(Self::TurnLeft),
            2 => Some(Self::TurnRight),
            3 => Some(Self::Stay),
            _ => None,
        }
    }
}

/// Cell position and heading (0 = north, 1 = east, 2 = south, 3 = west).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pose {
    pub x: i16,
    pub y: i16,
    pub heading: u8,
}

const STEP: [(i16, i16); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeObject {
    pub x: u16,
    pub y: u16,
    pub color: [u8; 3],
}

/// Two rooms separated by a wall column with a single doorway.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeSpec {
    pub width: u16,
    pub height: u16,
    pub door: (u16, u16),
    pub wall_hue: [u8; 3],
    pub objects: Vec<MazeObject>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Floor,
    Wall,
    Void,
}

impl MazeSpec {
    pub fn divider(&self) -> u16 {
        self.door.0
    }

    pub fn cell(&self, x: i16, y: i16) -> Cell {
        if x < 0 || y < 0 || x >= self.width as i16 || y >= self.height as i16 {
            return Cell::Void;
        }
        let (ux, uy) = (x as u16, y as u16);
        if ux == 0 || uy == 0 || ux == self.width - 1 || uy == self.height - 1 {
            return Cell::Wall;
        }
        if ux == self.divider() && (ux, uy) != self.door {
            return Cell::Wall;
        }
        Cell::Floor
    }

    pub fn is_floor(&self, x: i16, y: i16) -> bool {
        self.cell(x, y) == Cell::Floor
    }

    fn color_at(&self, x: i16, y: i16) -> [u8; 3] {
        match self.cell(x, y) {
            Cell::Void => VOID,
            Cell::Wall => self.wall_hue,
            Cell::Floor => self
                .objects
                .iter()
                .find(|o| o.x as i16 == x && o.y as i16 == y)
                .map_or(FLOOR, |o| o.color),
        }
    }

    /// Room index of a floor cell: 0 left of the divider, 1 right, 2 doorway.
    pub fn room(&self, x: i16) -> u8 {
        match (x as u16).cmp(&self.divider()) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Equal => 2,
        }
    }

    pub fn step(&self, pose: Pose, action: Action) -> Pose {
        match action {
            Action::Stay => pose,
            Action::TurnLeft => Pose {
                heading: (pose.heading + 3) % 4,
                ..pose
            },
            Action::TurnRight => Pose {
                heading: (pose.heading + 1) % 4,
                ..pose
            },
            Action::Forward => {
                let (dx, dy) = STEP[pose.heading as usize];
                let (nx, ny) = (pose.x + dx, pose.y + dy);
                if self.is_floor(nx, ny) {
                    Pose { x: nx, y: ny, ..pose }
                } else {
                    pose
                }
            }
        }
    }
}

/// A rendered trajectory. `actions[i]` moves `poses[i]` to `poses[i + 1]`;
/// the final action is `Stay`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub spec: MazeSpec,
    /// `FRAME × FRAME × 3` bytes per frame, row-major.
    pub frames: Vec<Vec<u8>>,
    pub actions: Vec<Action>,
    pub poses: Vec<Pose>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `i` as a `[3, FRAME, FRAME]` tensor in `[0, 1]`.
    pub fn frame_tensor(&self, i: usize) -> Tensor {
        bytes_to_chw(&self.frames[i])
    }
}

pub fn bytes_to_chw(hwc: &[u8]) -> Tensor {
    let n = FRAME * FRAME;
    Tensor::from_fn(vec![3, FRAME, FRAME], |i| {
        let (c, p) = (i / n, i % n);
        f64::from(hwc[p * 3 + c]) / 255.0
    })
}

/// Egocentric crop rendered to `FRAME × FRAME × 3` bytes: the agent sits at
/// the crop center facing up.
pub fn render_bytes(spec: &MazeSpec, pose: Pose) -> Vec<u8> {
    let half = (VIEW / 2) as i16;
    let mut cells = [[VOID; VIEW]; VIEW];
    for (r, row) in cells.iter_mut().enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            let fwd = half - r as i16;
            let right = c as i16 - half;
            let (dx, dy) = match pose.heading {
                0 => (right, -fwd),
                1 => (fwd, right),
                2 => (-right, fwd),
                _ => (-fwd, -right),
            };
            *px = spec.color_at(pose.x + dx, pose.y + dy);
        }
    }
    cells[VIEW / 2][VIEW / 2] = AGENT;
    let mut out = vec![0u8; FRAME * FRAME * 3];
    for py in 0..FRAME {
        for px in 0..FRAME {
            let rgb = cells[py * VIEW / FRAME][px * VIEW / FRAME];
            out[(py * FRAME + px) * 3..][..3].copy_from_slice(&rgb);
        }
    }
    out
}

pub fn render_observation(spec: &MazeSpec, pose: Pose) -> Tensor {
    bytes_to_chw(&render_bytes(spec, pose))
}

fn random_spec(rng: &mut ChaCha8Rng, seed: u64) -> MazeSpec {
    let divider = WIDTH / 2;
    let door = (divider, rng.gen_range(1..HEIGHT - 1));
    let hue_idx = rng.gen_range(0..PALETTE.len());
    let mut spec = MazeSpec {
        width: WIDTH,
        height: HEIGHT,
        door,
        wall_hue: PALETTE[hue_idx],
        objects: Vec::new(),
        seed,
    };
    let mut cells: Vec<(u16, u16)> = (1..HEIGHT - 1)
        .flat_map(|y| (1..WIDTH - 1).map(move |x| (x, y)))
        .filter(|&(x, _)| x != divider)
        .collect();
    cells.shuffle(rng);
    let mut colors: Vec<usize> = (0..PALETTE.len()).filter(|&i| i != hue_idx).collect();
    colors.shuffle(rng);
    let n_obj = rng.gen_range(2..=4);
    spec.objects = cells
        .iter()
        .zip(&colors)
        .take(n_obj)
        .map(|(&(x, y), &ci)| MazeObject {
            x,
            y,
            color: PALETTE[ci],
        })
        .collect();
    spec
}

fn bfs(spec: &MazeSpec, from: (i16, i16), to: (i16, i16)) -> Vec<(i16, i16)> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let idx = |x: i16, y: i16| y as usize * w + x as usize;
    let mut prev = vec![usize::MAX; w * h];
    let mut queue = VecDeque::from([from]);
    prev[idx(from.0, from.1)] = idx(from.0, from.1);
    while let Some((x, y)) = queue.pop_front() {
        if (x, y) == to {
            break;
        }
        for (dx, dy) in STEP {
            let (nx, ny) = (x + dx, y + dy);
            if spec.is_floor(nx, ny) && prev[idx(nx, ny)] == usize::MAX {
                prev[idx(nx, ny)] = idx(x, y);
                queue.push_back((nx, ny));
            }
        }
    }
    let mut path = vec![to];
    let mut cur = idx(to.0, to.1);
    while cur != idx(from.0, from.1) {
        cur = prev[cur];
        path.push(((cur % w) as i16, (cur / w) as i16));
    }
    path.reverse();
    path
}

fn turn_to(pose: &mut Pose, heading: u8, actions: &mut Vec<Action>) {
    match (heading + 4 - pose.heading) % 4 {
        0 => {}
        1 => actions.push(Action::TurnRight),
        3 => actions.push(Action::TurnLeft),
        _ => actions.extend([Action::TurnRight, Action::TurnRight]),
    }
    pose.heading = heading;
}

/// Actions for one lap visiting `waypoints` in order and returning to
/// `start` with its original heading.
fn lap_actions(spec: &MazeSpec, start: Pose, waypoints: &[(i16, i16)]) -> Vec<Action> {
    let mut pose = start;
    let mut actions = Vec::new();
    let targets = waypoints.iter().copied().chain(std::iter::once((start.x, start.y)));
    for target in targets {
        let path = bfs(spec, (pose.x, pose.y), target);
        for &(nx, ny) in &path[1..] {
            let heading = STEP.iter().position(|&d| d == (nx - pose.x, ny - pose.y)).unwrap() as u8;
            turn_to(&mut pose, heading, &mut actions);
            actions.push(Action::Forward);
            pose.x = nx;
            pose.y = ny;
        }
    }
    turn_to(&mut pose, start.heading, &mut actions);
    actions
}

fn random_floor_cell(spec: &MazeSpec, rng: &mut ChaCha8Rng, room: u8) -> (i16, i16) {
    loop {
        let x = rng.gen_range(1..spec.width as i16 - 1);
        let y = rng.gen_range(1..spec.height as i16 - 1);
        if spec.is_floor(x, y) && spec.room(x) == room {
            return (x, y);
        }
    }
}

/// Deterministic episode of `t` frames. The scripted agent repeats a lap
/// through both rooms; `Stay` actions are scattered so that the last pose
/// equals the first.
pub fn generate_episode(seed: u64, t: usize) -> Result<Episode> {
    if t < 2 {
        return contract(format!("episodes need at least 2 frames, got {t}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, seed);
    let (start, lap) = loop {
        let (sx, sy) = random_floor_cell(&spec, &mut rng, 0);
        let start = Pose {
            x: sx,
            y: sy,
            heading: rng.gen_range(0..4),
        };
        let w1 = random_floor_cell(&spec, &mut rng, 1);
        let w2 = random_floor_cell(&spec, &mut rng, 1);
        let lap = lap_actions(&spec, start, &[w1, w2]);
        if LAP_RANGE.contains(&lap.len()) {
            break (start, lap);
        }
    };
    let transitions = t - 1;
    let mut moves: Vec<Action> = lap.iter().copied().cycle().take(transitions / lap.len() * lap.len()).collect();
    if moves.is_empty() {
        moves = lap.iter().copied().take(transitions).collect();
    }
    while moves.len() < transitions {
        let at = rng.gen_range(0..=moves.len());
        moves.insert(at, Action::Stay);
    }
    moves.push(Action::Stay);

    let mut poses = Vec::with_capacity(t);
    let mut pose = start;
    for &a in &moves {
        poses.push(pose);
        pose = spec.step(pose, a);
    }
    let frames = poses.iter().map(|&p| render_bytes(&spec, p)).collect();
    Ok(Episode {
        spec,
        frames,
        actions: moves,
        poses,
    })
}

const MAGIC: &[u8; 4] = b"MMEP";
const VERSION: u32 = 1;

pub fn encode_episodes(episodes: &[Episode]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    for ep in episodes {
        let s = &ep.spec;
        for v in [s.width, s.height, s.door.0, s.door.1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&s.wall_hue);
        b.push(s.objects.len() as u8);
        for o in &s.objects {
            b.extend_from_slice(&o.x.to_le_bytes());
            b.extend_from_slice(&o.y.to_le_bytes());
            b.extend_from_slice(&o.color);
        }
        b.extend_from_slice(&s.seed.to_le_bytes());
        b.extend_from_slice(&(FRAME as u16).to_le_bytes());
        b.extend_from_slice(&(ep.len() as u32).to_le_bytes());
        for f in &ep.frames {
            b.extend_from_slice(f);
        }
        b.extend(ep.actions.iter().map(|&a| a as u8));
        for p in &ep.poses {
            for v in [p.x, p.y, i16::from(p.heading)] {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}


/// Parses an episode file image. Nothing is returned unless the checksum
/// and the whole structure are valid.
pub fn decode_episodes(bytes: &[u8], path: &str) -> Result<Vec<Episode>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_string(),
            msg: "bad magic, not an episode file".into(),
        });
    }
    let payload = verify_crc(bytes, path)?;
    let mut r = Reader { buf: payload, pos: 4, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (width, height, dx, dy) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
        let wall_hue = r.rgb()?;
        let n_obj = r.u8()? as usize;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            objects.push(MazeObject {
                x: r.u16()?,
                y: r.u16()?,
                color: r.rgb()?,
            });
        }
        let seed = r.u64()?;
        let side = r.u16()? as usize;
        if side != FRAME {
            return Err(r.err(format!("frame side {side}, expected {FRAME}")));
        }
        let t = r.u32()? as usize;
        let frame_bytes = side * side * 3;
        let frames = (0..t).map(|_| r.take(frame_bytes).map(<[u8]>::to_vec)).collect::<Result<Vec<_>>>()?;
        let actions = r
            .take(t)?
            .iter()
            .map(|&a| Action::from_u8(a).ok_or_else(|| r.err(format!("bad action id {a}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut poses = Vec::with_capacity(t);
        for _ in 0..t {
            let (x, y, h) = (r.i16()?, r.i16()?, r.i16()?);
            if !(0..4).contains(&h) {
                return Err(r.err(format!("bad heading {h}")));
            }
            poses.push(Pose { x, y, heading: h as u8 });
        }
        episodes.push(Episode {
            spec: MazeSpec {
                width,
                height,
                door: (dx, dy),
                wall_hue,
                objects,
                seed,
            },
            frames,
            actions,
            poses,
        });
    }
    if r.pos != payload.len() {
        return Err(r.err("trailing bytes after last episode"));
    }
    Ok(episodes)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let bytes = encode_episodes(episodes);
    let mut f = std::fs::File::create(path).io_ctx(|| format!("creating {}", path.display()))?;
    f.write_all(&bytes).io_ctx(|| format!("writing {}", path.display()))
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let bytes = std::fs::read(path).io_ctx(|| format!("reading {}", path.display()))?;
    decode_episodes(&bytes, &path.display().to_string())
}
