use super::{PlannerError, StagePoint, TravelMode};

/// Length of the open path visiting `points` in `order`.
pub fn path_length(points: &[StagePoint], order: &[usize]) -> f64 {
    order.windows(2).map(|w| points[w[0]].distance(points[w[1]])).sum()
}

/// Order in which to visit `points`. The traveling-salesman route starts at
/// `points[0]` and is open-ended.
pub fn plan_route(points: &[StagePoint], mode: TravelMode, user_order: Option<&[usize]>) -> Result<Vec<usize>, PlannerError> {
    if points.is_empty() {
        return Err(PlannerError::Parameter("cannot route an empty point set".into()));
    }
    match mode {
        TravelMode::UserDefined => {
            let order = user_order.ok_or_else(|| PlannerError::Parameter("user-defined travel needs an order".into()))?;
            check_permutation(order, points.len())?;
            Ok(order.to_vec())
        }
        TravelMode::TravelingSalesman => {
            if user_order.is_some() {
                return Err(PlannerError::Parameter("an explicit order is only accepted in user-defined mode".into()));
            }
            Ok(shortest_open_path(points, None))
        }
    }
}

/// Traveling-salesman route over `points` for a stage currently at `start`.
pub fn plan_route_from(start: StagePoint, points: &[StagePoint]) -> Result<Vec<usize>, PlannerError> {
    if points.is_empty() {
        return Err(PlannerError::Parameter("cannot route an empty point set".into()));
    }
    Ok(shortest_open_path(points, Some(start)))
}

fn check_permutation(order: &[usize], n: usize) -> Result<(), PlannerError> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(PlannerError::Parameter(format!("order has {} entries for {n} points", order.len())));
    }
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(PlannerError::Parameter("order is not a permutation of the points".into()));
        }
    }
    Ok(())
}

/// Nearest-neighbour construction followed by 2-opt and segment relocation
/// until neither improves. With `start` the path begins at that external
/// position; otherwise at point 0.
fn shortest_open_path(points: &[StagePoint], start: Option<StagePoint>) -> Vec<usize> {
    // node 0 is the fixed origin; real points are shifted by `off`
    let mut nodes = Vec::with_capacity(points.len() + 1);
    let off = usize::from(start.is_some());
    if let Some(s) = start {
        nodes.push(s);
    }
    nodes.extend_from_slice(points);
    let n = nodes.len();
    let d = |a: usize, b: usize| nodes[a].distance(nodes[b]);

    let mut path = Vec::with_capacity(n);
    let mut used = vec![false; n];
    path.push(0);
    used[0] = true;
    for _ in 1..n {
        let last = *path.last().expect("non-empty");
        let mut best = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let dj = d(last, j);
            if best.is_none_or(|(_, bd)| dj < bd) {
                best = Some((j, dj));
            }
        }
        let (j, _) = best.expect("unvisited node remains");
        used[j] = true;
        path.push(j);
    }

    const EPS: f64 = 1e-10;
    loop {
        let mut improved = false;
        // 2-opt: reverse path[i..=j]; the origin at index 0 never moves
        for i in 1..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let before = d(path[i - 1], path[i]) + if j + 1 < n { d(path[j], path[j + 1]) } else { 0.0 };
                let after = d(path[i - 1], path[j]) + if j + 1 < n { d(path[i], path[j + 1]) } else { 0.0 };
                if after + EPS < before {
                    path[i..=j].reverse();
                    improved = true;
                }
            }
        }
        // relocate segments of 1..=3 nodes, possibly reversed
        'relocate: for len in 1..=3usize {
            for i in 1..n {
                if i + len > n {
                    break;
                }
                let seg: Vec<usize> = path[i..i + len].to_vec();
                let prev = path[i - 1];
                let next = path.get(i + len).copied();
                let removal_gain = d(prev, seg[0]) + next.map_or(0.0, |nx| d(seg[len - 1], nx))
                    - next.map_or(0.0, |nx| d(prev, nx));
                let mut rest: Vec<usize> = path[..i].to_vec();
                rest.extend_from_slice(&path[i + len..]);
                for k in 0..rest.len() {
                    let a = rest[k];
                    let b = rest.get(k + 1).copied();
                    let base = b.map_or(0.0, |b| d(a, b));
                    for reversed in [false, true] {
                        let (first, last) = if reversed { (seg[len - 1], seg[0]) } else { (seg[0], seg[len - 1]) };
                        let insert_cost = d(a, first) + b.map_or(0.0, |b| d(last, b)) - base;
                        if insert_cost + EPS < removal_gain {
                            let mut new_path = rest[..=k].to_vec();
                            if reversed {
                                new_path.extend(seg.iter().rev());
                            } else {
                                new_path.extend_from_slice(&seg);
                            }
                            new_path.extend_from_slice(&rest[k + 1..]);
                            path = new_path;
                            improved = true;
                            break 'relocate;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }

    path.into_iter().skip(off).map(|i| i - off).collect()
}

/// Nearest-neighbour route only; used to bound the improved route.
#[cfg(test)]
pub(crate) fn nearest_neighbor(points: &[StagePoint]) -> Vec<usize> {
    let n = points.len();
    let mut path = vec![0];
    let mut used = vec![false; n];
    used[0] = true;
    for _ in 1..n {
        let last = *path.last().unwrap();
        let j = (0..n)
            .filter(|&j| !used[j])
            .min_by(|&a, &b| points[last].distance(points[a]).total_cmp(&points[last].distance(points[b])))
            .unwrap();
        used[j] = true;
        path.push(j);
    }
    path
}
