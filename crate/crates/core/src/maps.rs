//! Precomputed index maps for the gather op: window tiling, token layout,
//! head splitting, resampling, padding, crops.
//!
//! Maps are memoized per thread keyed by their defining dimensions; model
//! shapes repeat every step, so each map is built once per run.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

type Map = Arc<Vec<usize>>;

#[derive(Clone, PartialEq, Eq, Hash)]
enum Key {
    Partition { c: usize, h: usize, w: usize, win: usize },
    Merge { c: usize, h: usize, w: usize, win: usize },
    Tokens { c: usize, h: usize, w: usize, win: usize },
    Untokens { c: usize, h: usize, w: usize, win: usize },
    SplitHeads { p: usize, n: usize, c: usize, heads: usize },
    MergeHeads { p: usize, n: usize, c: usize, heads: usize },
    SliceHeadCols { p: usize, heads: usize, n: usize, c: usize },
    BiasIndex { win: usize, heads: usize },
    FieldComponent { p: usize, heads: usize, win: usize, offset: usize },
    UpsampleNearest { c: usize, h: usize, w: usize },
    Subsample { c: usize, h: usize, w: usize },
    ReflectPad { c: usize, h: usize, w: usize, ph: usize, pw: usize },
    Crop { c: usize, h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize },
}

thread_local! {
    static CACHE: RefCell<HashMap<Key, Map>> = RefCell::new(HashMap::new());
}

fn memo(key: Key, build: impl FnOnce() -> Vec<usize>) -> Map {
    CACHE.with(|c| {
        if let Some(m) = c.borrow().get(&key) {
            return Arc::clone(m);
        }
        let m = Arc::new(build());
        c.borrow_mut().insert(key, Arc::clone(&m));
        m
    })
}

/// `[C,H,W] -> [P,C,win,win]`, row-major window order.
pub fn partition(c: usize, h: usize, w: usize, win: usize) -> Map {
    memo(Key::Partition { c, h, w, win }, || {
        let (mh, mw) = (h / win, w / win);
        let mut m = Vec::with_capacity(c * h * w);
        for p in 0..mh * mw {
            let (py, px) = (p / mw, p % mw);
            for ch in 0..c {
                for r in 0..win {
                    for q in 0..win {
                        m.push(ch * h * w + (py * win + r) * w + (px * win + q));
                    }
                }
            }
        }
        m
    })
}

/// `[P,C,win,win] -> [C,H,W]`, exact inverse of [`partition`].
pub fn merge(c: usize, h: usize, w: usize, win: usize) -> Map {
    memo(Key::Merge { c, h, w, win }, || {
        let mw = w / win;
        let mut m = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let p = (y / win) * mw + x / win;
                    let (r, q) = (y % win, x % win);
                    m.push(((p * c + ch) * win + r) * win + q);
                }
            }
        }
        m
    })
}

/// `[C,H,W] -> [P,N,C]` token matrices per window (N = win^2).
pub fn tokens(c: usize, h: usize, w: usize, win: usize) -> Map {
    memo(Key::Tokens { c, h, w, win }, || {
        let (mh, mw) = (h / win, w / win);
        let n = win * win;
        let mut m = Vec::with_capacity(c * h * w);
        for p in 0..mh * mw {
            let (py, px) = (p / mw, p % mw);
            for t in 0..n {
                let (r, q) = (t / win, t % win);
                for ch in 0..c {
                    m.push(ch * h * w + (py * win + r) * w + (px * win + q));
                }
            }
        }
        m
    })
}

/// `[P,N,C] -> [C,H,W]`, exact inverse of [`tokens`].
pub fn untokens(c: usize, h: usize, w: usize, win: usize) -> Map {
    memo(Key::Untokens { c, h, w, win }, || {
        let mw = w / win;
        let n = win * win;
        let mut m = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let p = (y / win) * mw + x / win;
                    let t = (y % win) * win + x % win;
                    m.push((p * n + t) * c + ch);
                }
            }
        }
        m
    })
}

/// `[P,N,C] -> [P,heads,N,d]` with d = c / heads.
pub fn split_heads(p: usize, n: usize, c: usize, heads: usize) -> Map {
    memo(Key::SplitHeads { p, n, c, heads }, || {
        let d = c / heads;
        let mut m = Vec::with_capacity(p * n * c);
        for pi in 0..p {
            for h in 0..heads {
                for t in 0..n {
                    for j in 0..d {
                        m.push((pi * n + t) * c + h * d + j);
                    }
                }
            }
        }
        m
    })
}

/// `[P,heads,N,d] -> [P,N,C]`, inverse of [`split_heads`].
pub fn merge_heads(p: usize, n: usize, c: usize, heads: usize) -> Map {
    memo(Key::MergeHeads { p, n, c, heads }, || {
        let d = c / heads;
        let mut m = Vec::with_capacity(p * n * c);
        for pi in 0..p {
            for t in 0..n {
                for ch in 0..c {
                    let (h, j) = (ch / d, ch % d);
                    m.push(((pi * heads + h) * n + t) * d + j);
                }
            }
        }
        m
    })
}

/// `[P*heads, N, C] -> [P,heads,N,d]`: each (patch, head) token matrix keeps
/// only its own head's projection columns.
pub fn slice_head_cols(p: usize, heads: usize, n: usize, c: usize) -> Map {
    memo(Key::SliceHeadCols { p, heads, n, c }, || {
        let d = c / heads;
        let mut m = Vec::with_capacity(p * heads * n * d);
        for pi in 0..p {
            for h in 0..heads {
                let block = (pi * heads + h) * n;
                for t in 0..n {
                    for j in 0..d {
                        m.push((block + t) * c + h * d + j);
                    }
                }
            }
        }
        m
    })
}

/// Relative-position index: table `[(2w-1)^2, heads]` -> bias `[heads,N,N]`.
pub fn bias_index(win: usize, heads: usize) -> Map {
    memo(Key::BiasIndex { win, heads }, || {
        let n = win * win;
        let span = 2 * win - 1;
        let mut m = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let dr = (i / win) as isize - (j / win) as isize + win as isize - 1;
                    let dc = (i % win) as isize - (j % win) as isize + win as isize - 1;
                    let rel = dr as usize * span + dc as usize;
                    m.push(rel * heads + h);
                }
            }
        }
        m
    })
}

/// Picks one (x,y) pair out of the packed `[P,heads,win,win,4]` offset-head
/// output: `offset` 0 selects the scale pair, 2 the bias pair.
pub fn field_component(p: usize, heads: usize, win: usize, offset: usize) -> Map {
    memo(Key::FieldComponent { p, heads, win, offset }, || {
        let cells = p * heads * win * win;
        let mut m = Vec::with_capacity(cells * 2);
        for cell in 0..cells {
            m.push(cell * 4 + offset);
            m.push(cell * 4 + offset + 1);
        }
        m
    })
}

/// `[C,H,W] -> [C,2H,2W]` nearest neighbor.
pub fn upsample_nearest(c: usize, h: usize, w: usize) -> Map {
    memo(Key::UpsampleNearest { c, h, w }, || {
        let mut m = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    m.push(ch * h * w + (y / 2) * w + x / 2);
                }
            }
        }
        m
    })
}

/// `[C,H,W] -> [C,H/2,W/2]` keeping even rows and columns.
pub fn subsample2(c: usize, h: usize, w: usize) -> Map {
    memo(Key::Subsample { c, h, w }, || {
        let (oh, ow) = (h / 2, w / 2);
        let mut m = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    m.push(ch * h * w + 2 * y * w + 2 * x);
                }
            }
        }
        m
    })
}

/// Reflection pad on the bottom/right: `[C,H,W] -> [C,H+ph,W+pw]`.
/// Requires `ph < H` and `pw < W`.
pub fn reflect_pad(c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Map {
    memo(Key::ReflectPad { c, h, w, ph, pw }, || {
        let (oh, ow) = (h + ph, w + pw);
        let mut m = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let sy = if y < h { y } else { 2 * h - 2 - y };
                for x in 0..ow {
                    let sx = if x < w { x } else { 2 * w - 2 - x };
                    m.push(ch * h * w + sy * w + sx);
                }
            }
        }
        m
    })
}

/// Crop `[C,H,W] -> [C,oh,ow]` starting at `(oy, ox)`.
pub fn crop(c: usize, h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> Map {
    memo(Key::Crop { c, h, w, oh, ow, oy, ox }, || {
        let mut m = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    m.push(ch * h * w + (y + oy) * w + (x + ox));
                }
            }
        }
        m
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_and_merge_are_inverse() {
        let (c, h, w, win) = (3, 4, 6, 2);
        let part = partition(c, h, w, win);
        let merg = merge(c, h, w, win);
        for i in 0..c * h * w {
            assert_eq!(part[merg[i]], i);
        }
    }

    #[test]
    fn tokens_and_untokens_are_inverse() {
        let (c, h, w, win) = (4, 4, 4, 2);
        let tok = tokens(c, h, w, win);
        let untok = untokens(c, h, w, win);
        for i in 0..c * h * w {
            assert_eq!(tok[untok[i]], i);
        }
    }

    #[test]
    fn head_split_roundtrip() {
        let (p, n, c, heads) = (2, 4, 6, 3);
        let sp = split_heads(p, n, c, heads);
        let mg = merge_heads(p, n, c, heads);
        for i in 0..p * n * c {
            assert_eq!(sp[mg[i]], i);
        }
    }

    #[test]
    fn bias_index_covers_all_offsets_for_w2() {
        let m = bias_index(2, 1);
        let mut seen = std::collections::HashSet::new();
        for &v in m.iter() {
            seen.insert(v);
        }
        assert_eq!(seen.len(), 9, "w=2 hits all (2w-1)^2 relative offsets");
        // the diagonal (i == j) always uses the centered (0,0) offset
        let n = 4;
        let span = 3;
        let center = (span - 1) / 2 * span + (span - 1) / 2;
        for i in 0..n {
            assert_eq!(m[i * n + i], center);
        }
    }

    #[test]
    fn reflect_pad_mirrors_interior() {
        let m = reflect_pad(1, 3, 3, 2, 1);
        // row 3 of the padded output mirrors row 1, row 4 mirrors row 0
        assert_eq!(m[3 * 4], 1 * 3);
        assert_eq!(m[4 * 4], 0);
        // col 3 mirrors col 1
        assert_eq!(m[3], 1);
    }
}
