//! Partitioned, best-effort asynchronous execution of one world.
//!
//! The grid is split into k equal rectangles, each advanced by its own
//! worker thread. Boundary interactions flow through most-recent-value
//! mailboxes: publishes and reads never block, stale reads are allowed,
//! and a paused neighbor never stops a worker from making progress.
//! With k = 1 execution reduces to the deterministic serial path.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::config::RunConfig;
use crate::world::boundary::EdgeMailbox;
use crate::world::cell::{Dir, Tile, DIRS};
use crate::world::World;

#[derive(Debug, thiserror::Error)]
pub enum PartitionError {
    #[error("{workers} workers cannot evenly tile a {width}x{height} grid")]
    Uneven {
        workers: usize,
        width: usize,
        height: usize,
    },
}

/// How long to run a partitioned simulation.
#[derive(Clone, Copy, Debug)]
pub enum Duration_ {
    Updates(u64),
    Seconds(f64),
}

#[derive(Clone, Debug)]
pub struct WorkerStats {
    pub updates: Vec<u64>,
    pub mailbox_published: u64,
    pub mailbox_consumed: u64,
}

impl WorkerStats {
    pub fn min(&self) -> u64 {
        self.updates.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> u64 {
        self.updates.iter().copied().max().unwrap_or(0)
    }

    /// (max - min) / max, the relative spread between the fastest and
    /// slowest worker.
    pub fn spread(&self) -> f64 {
        let max = self.max();
        if max == 0 {
            return 0.0;
        }
        (max - self.min()) as f64 / max as f64
    }
}

/// The worker layout: k factored into a grid of equal rectangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    pub workers_x: usize,
    pub workers_y: usize,
    pub tile_w: usize,
    pub tile_h: usize,
}

impl Partition {
    /// Squarest factorization of `k` that evenly divides the grid.
    pub fn plan(width: usize, height: usize, k: usize) -> Result<Partition, PartitionError> {
        let k = k.max(1);
        let mut best: Option<Partition> = None;
        for ky in 1..=k {
            if k % ky != 0 {
                continue;
            }
            let kx = k / ky;
            if width % kx != 0 || height % ky != 0 {
                continue;
            }
            let p = Partition {
                workers_x: kx,
                workers_y: ky,
                tile_w: width / kx,
                tile_h: height / ky,
            };
            let squareness = |p: &Partition| {
                let a = p.tile_w as f64;
                let b = p.tile_h as f64;
                (a / b).max(b / a)
            };
            best = match best {
                None => Some(p),
                Some(cur) if squareness(&p) < squareness(&cur) => Some(p),
                keep => keep,
            };
        }
        best.ok_or(PartitionError::Uneven {
            workers: k,
            width,
            height,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.workers_x * self.workers_y
    }

    pub fn region_of_worker(&self, w: usize) -> (usize, usize, usize, usize) {
        let wx = w % self.workers_x;
        let wy = w / self.workers_x;
        (wx * self.tile_w, wy * self.tile_h, self.tile_w, self.tile_h)
    }
}

/// Run `world` for `duration`, split across `k` workers. Returns the
/// reassembled world and per-worker statistics.
pub fn run_partitioned(
    world: World,
    k: usize,
    duration: Duration_,
) -> Result<(World, WorkerStats), PartitionError> {
    if k <= 1 {
        let mut world = world;
        let updates = run_serial(&mut world, duration);
        let stats = WorkerStats {
            updates: vec![updates],
            mailbox_published: 0,
            mailbox_consumed: 0,
        };
        return Ok((world, stats));
    }

    let width = world.width();
    let height = world.height();
    let plan = Partition::plan(width, height, k)?;
    let cfg = world.cfg.clone();
    let base_seed = digest_seed(&world);

    // carve the full world into per-worker subworlds
    let mut tiles: Vec<Option<Tile>> = world.tiles.into_iter().map(Some).collect();
    let mut subworlds: Vec<World> = Vec::with_capacity(plan.num_workers());
    for w in 0..plan.num_workers() {
        let (ox, oy, rw, rh) = plan.region_of_worker(w);
        let mut sub = World::with_dims(
            cfg.clone(),
            base_seed ^ (w as u64 + 1).wrapping_mul(0x9e37_79b9),
            rw,
            rh,
            false,
        );
        sub.worker_id = w;
        for y in 0..rh {
            for x in 0..rw {
                let global = (oy + y) * width + (ox + x);
                sub.tiles[y * rw + x] = tiles[global].take().expect("tile taken twice");
            }
        }
        subworlds.push(sub);
    }

    // wire mailboxes along shared edges, including torus wraps
    let mut mailboxes: Vec<Arc<EdgeMailbox>> = Vec::new();
    {
        let mut registry: HashMap<(usize, usize, Dir), Arc<EdgeMailbox>> = HashMap::new();
        for w in 0..plan.num_workers() {
            let (ox, oy, rw, rh) = plan.region_of_worker(w);
            for y in 0..rh {
                for x in 0..rw {
                    let local = y * rw + x;
                    for dir in DIRS {
                        if subworlds[w].neighbor_of(local, dir).is_some() {
                            continue;
                        }
                        let gx = ox + x;
                        let gy = oy + y;
                        let (nx, ny) = dir.offset(gx, gy, width, height);
                        let global_here = gy * width + gx;
                        let global_there = ny * width + nx;
                        // outgoing mailbox: keyed by sender tile + dir
                        let out = registry
                            .entry((global_here, global_there, dir))
                            .or_insert_with(|| {
                                let mb = Arc::new(EdgeMailbox::new());
                                mailboxes.push(mb.clone());
                                mb
                            })
                            .clone();
                        subworlds[w].remote_out.insert((local, dir), out);
                        // incoming mailbox: what the neighbor publishes toward us
                        let inc = registry
                            .entry((global_there, global_here, dir.opposite()))
                            .or_insert_with(|| {
                                let mb = Arc::new(EdgeMailbox::new());
                                mailboxes.push(mb.clone());
                                mb
                            })
                            .clone();
                        subworlds[w].remote_in.insert((local, dir), inc);
                    }
                }
            }
        }
    }

    // run the workers
    let stop = Arc::new(AtomicBool::new(false));
    let results: Vec<(World, u64)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for mut sub in subworlds {
            let stop = stop.clone();
            handles.push(scope.spawn(move || {
                let mut updates = 0u64;
                match duration {
                    Duration_::Updates(n) => {
                        while updates < n {
                            sub.step_update();
                            updates += 1;
                        }
                    }
                    Duration_::Seconds(s) => {
                        let deadline = Instant::now() + Duration::from_secs_f64(s);
                        while Instant::now() < deadline && !stop.load(Ordering::Relaxed) {
                            sub.step_update();
                            updates += 1;
                        }
                        stop.store(true, Ordering::Relaxed);
                    }
                }
                (sub, updates)
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    // stitch the subworlds back into one full world
    let mut assembled = World::new(cfg, base_seed ^ 0x5151_5151);
    let mut update_counts = Vec::with_capacity(results.len());
    let mut max_update = 0;
    for (sub, updates) in results {
        let w = sub.worker_id;
        let (ox, oy, rw, rh) = plan.region_of_worker(w);
        max_update = max_update.max(sub.update);
        for (local, tile) in sub.tiles.into_iter().enumerate() {
            let x = local % rw;
            let y = local / rw;
            let global = (oy + y) * width + (ox + x);
            assembled.tiles[global] = tile;
        }
        update_counts.push(updates);
    }
    assembled.update = max_update;

    let mut published = 0;
    let mut consumed = 0;
    for mb in &mailboxes {
        let (p, c) = mb.stats();
        published += p;
        consumed += c;
    }
    // order stats by worker id
    let stats = WorkerStats {
        updates: update_counts,
        mailbox_published: published,
        mailbox_consumed: consumed,
    };
    Ok((assembled, stats))
}

fn run_serial(world: &mut World, duration: Duration_) -> u64 {
    let mut updates = 0u64;
    match duration {
        Duration_::Updates(n) => {
            for _ in 0..n {
                world.step_update();
                updates += 1;
            }
        }
        Duration_::Seconds(s) => {
            let deadline = Instant::now() + Duration::from_secs_f64(s);
            while Instant::now() < deadline {
                world.step_update();
                updates += 1;
            }
        }
    }
    updates
}

/// Stable seed derived from the world state, so partitioned runs
/// started from the same state use the same worker seeds.
fn digest_seed(world: &World) -> u64 {
    let digest = world.state_digest();
    u64::from_str_radix(&digest[..16], 16).unwrap_or(0x5eed)
}

/// Convenience wrapper building a world from config and genomes.
pub fn run_fresh(
    cfg: Arc<RunConfig>,
    seed: u64,
    genomes: Vec<Arc<crate::genome::Genome>>,
    k: usize,
    duration: Duration_,
) -> Result<(World, WorkerStats), PartitionError> {
    let mut world = World::new(cfg, seed);
    world.seed_cells(genomes);
    run_partitioned(world, k, duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::Genome;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(n: usize) -> Arc<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.n_cells = n;
        Arc::new(cfg)
    }

    #[test]
    fn partition_plan_four_way() {
        let p = Partition::plan(120, 120, 4).unwrap();
        assert_eq!(p.num_workers(), 4);
        assert_eq!((p.tile_w, p.tile_h), (60, 60));
        assert!(Partition::plan(10, 10, 3).is_err());
    }

    #[test]
    fn serial_runs_are_bit_identical() {
        let cfg = small_cfg(100);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let genomes: Vec<_> = (0..20)
            .map(|i| {
                let mut g = Genome::generate_random(16, &mut rng);
                g.root_id = i;
                Arc::new(g)
            })
            .collect();
        let (w1, s1) = run_fresh(cfg.clone(), 99, genomes.clone(), 1, Duration_::Updates(200)).unwrap();
        let (w2, _) = run_fresh(cfg, 99, genomes, 1, Duration_::Updates(200)).unwrap();
        assert_eq!(s1.updates, vec![200]);
        assert_eq!(s1.spread(), 0.0);
        assert_eq!(w1.state_digest(), w2.state_digest());
    }

    #[test]
    fn four_workers_tile_the_grid_and_exchange() {
        let cfg = small_cfg(400); // 20x20 -> four 10x10 subgrids
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let genomes: Vec<_> = (0..100)
            .map(|i| {
                let mut g = Genome::generate_random(32, &mut rng);
                g.root_id = i;
                Arc::new(g)
            })
            .collect();
        let (world, stats) = run_fresh(cfg, 7, genomes, 4, Duration_::Updates(64)).unwrap();
        assert_eq!(stats.updates.len(), 4);
        assert!(stats.updates.iter().all(|&u| u == 64));
        assert_eq!(world.num_tiles(), 400);
        assert!(world.live_count() > 0, "population survived the stitching");
        // mailbox conservation: consumed batches never exceed published
        assert!(stats.mailbox_consumed <= stats.mailbox_published);
        assert!(stats.mailbox_published > 0, "boundary traffic flowed");
    }

    #[test]
    fn wall_clock_mode_reports_progress() {
        let cfg = small_cfg(100);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let genomes = vec![Arc::new(Genome::generate_random(8, &mut rng))];
        let (_, stats) = run_fresh(cfg, 1, genomes, 1, Duration_::Seconds(0.05)).unwrap();
        assert!(stats.updates[0] > 0);
    }
}
