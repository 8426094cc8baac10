//! Independent reference implementations shared by the test targets.

#![allow(dead_code)]

use std::collections::VecDeque;

use impressions::{Field, PixelCoord, Shape};

/// TV by explicit loops over valid neighbour pairs.
pub fn naive_tv(shape: Shape, d: &[f64]) -> f64 {
    let at = |y: usize, x: usize, c: usize| d[(y * shape.width + x) * shape.channels + c];
    let mut total = 0.0;
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                if y + 1 < shape.height {
                    total += (at(y + 1, x, c) - at(y, x, c)).abs();
                }
                if x + 1 < shape.width {
                    total += (at(y, x + 1, c) - at(y, x, c)).abs();
                }
            }
        }
    }
    total
}

/// Whole-image masked sum for every center; independent disk test.
pub fn brute_force_center(lr: &Field, radius: f64) -> PixelCoord {
    let s = lr.shape();
    let mut best = (f64::NEG_INFINITY, PixelCoord::new(0, 0));
    for cy in 0..s.height {
        for cx in 0..s.width {
            let mut score = 0.0;
            for y in 0..s.height {
                for x in 0..s.width {
                    let inside = ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() <= radius;
                    for c in 0..s.channels {
                        score += if inside { lr.get(y, x, c).abs() } else { 0.0 };
                    }
                }
            }
            if score > best.0 {
                best = (score, PixelCoord::new(cy, cx));
            }
        }
    }
    best.1
}

/// Breadth-first flood fill over a row-major binary grid.
pub fn flood_fill_count(on: &[bool], h: usize, w: usize, eight: bool) -> usize {
    let mut seen = vec![false; on.len()];
    let mut count = 0;
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}
