//! Reader for the MATPOWER `mpc` matrix text format (version 2 column order).
//!
//! Only the tables the model uses are interpreted: `baseMVA`, `bus`, `gen`,
//! `branch` and `gencost`. Any other `mpc.*` assignment is skipped. Out of
//! service generators and branches are dropped together with their cost rows.
//!
//! MATPOWER treats bus types as power-flow hints. Here they are normalized
//! to generator placement: a non-slack bus with an in-service generator is
//! PV and a PV bus without one is PQ.

use super::{BusKind, CaseError, RawBranch, RawBus, RawCase, RawCost, RawGenerator};

struct Matrix {
    rows: Vec<(usize, Vec<f64>)>,
}

pub fn parse_matpower(text: &str, name: &str) -> Result<RawCase, CaseError> {
    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;
    let mut gencost = None;

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line_no = i + 1;
        let line = strip_comment(lines[i]).trim();
        i += 1;
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((key, value)) = rest.split_once('=') else {
            return Err(syntax(line_no, "expected `mpc.<field> = ...`"));
        };
        let key = key.trim();
        let value = value.trim();
        if let Some(body) = value.strip_prefix('[') {
            let (matrix, next) = read_matrix(&lines, body, line_no, i)?;
            i = next;
            match key {
                "bus" => bus = Some(matrix),
                "gen" => gen = Some(matrix),
                "branch" => branch = Some(matrix),
                "gencost" => gencost = Some(matrix),
                _ => {}
            }
        } else if value.starts_with('{') {
            // Cell arrays (bus names and the like) carry nothing we use.
            let mut closed = value.contains('}');
            while !closed && i < lines.len() {
                closed = strip_comment(lines[i]).contains('}');
                i += 1;
            }
            if !closed {
                return Err(syntax(lines.len(), "unterminated cell array"));
            }
        } else if key == "baseMVA" {
            let v = value.trim_end_matches(';').trim();
            base_mva = Some(parse_number(v).ok_or_else(|| syntax(line_no, "baseMVA is not a number"))?);
        }
    }

    let base_mva = base_mva.ok_or_else(|| CaseError::Invalid("missing mpc.baseMVA".into()))?;
    let bus = bus.ok_or_else(|| CaseError::Invalid("missing mpc.bus".into()))?;
    let gen = gen.ok_or_else(|| CaseError::Invalid("missing mpc.gen".into()))?;
    let branch = branch.ok_or_else(|| CaseError::Invalid("missing mpc.branch".into()))?;

    let mut raw = RawCase {
        name: name.to_string(),
        base_mva,
        bus: Vec::with_capacity(bus.rows.len()),
        branch: Vec::with_capacity(branch.rows.len()),
        generator: Vec::with_capacity(gen.rows.len()),
    };

    for (line, row) in &bus.rows {
        require_cols(*line, row, 13, "bus")?;
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => return Err(CaseError::Unsupported(format!("isolated bus {} (type 4)", row[0]))),
            t => return Err(syntax(*line, &format!("unknown bus type {t}"))),
        };
        raw.bus.push(RawBus {
            id: as_id(*line, row[0])?,
            kind,
            pd_mw: row[2],
            qd_mvar: row[3],
            gs_mw: row[4],
            bs_mvar: row[5],
            vm_min: row[12],
            vm_max: row[11],
            base_kv: row[9],
        });
    }

    for (line, row) in &branch.rows {
        require_cols(*line, row, 11, "branch")?;
        if row[10] == 0.0 {
            continue;
        }
        raw.branch.push(RawBranch {
            from: as_id(*line, row[0])?,
            to: as_id(*line, row[1])?,
            r: row[2],
            x: row[3],
            b: row[4],
            rate_a_mva: row[5],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift_deg: row[9],
        });
    }

    let costs = gencost.map(|m| m.rows).unwrap_or_default();
    for (k, (line, row)) in gen.rows.iter().enumerate() {
        require_cols(*line, row, 10, "gen")?;
        let bus_id = as_id(*line, row[0])?;
        let cost = match costs.get(k) {
            Some((cline, crow)) => parse_cost(*cline, crow)?,
            None => return Err(CaseError::MissingCost { gen: k + 1, bus: bus_id }),
        };
        if row[7] <= 0.0 {
            continue;
        }
        raw.generator.push(RawGenerator {
            bus: bus_id,
            pg_mw: row[1],
            pmin_mw: row[9],
            pmax_mw: row[8],
            qmin_mvar: row[4],
            qmax_mvar: row[3],
            vg: row[5],
            cost: Some(cost),
        });
    }
    normalize_bus_kinds(&mut raw);
    Ok(raw)
}

fn normalize_bus_kinds(raw: &mut RawCase) {
    for bus in &mut raw.bus {
        let has_gen = raw.generator.iter().any(|g| g.bus == bus.id);
        let kind = match (bus.kind, has_gen) {
            (BusKind::Slack, _) => BusKind::Slack,
            (_, true) => BusKind::Pv,
            (_, false) => BusKind::Pq,
        };
        if kind != bus.kind {
            log::info!(
                "{}: bus {} retyped {:?} -> {:?} to match generator placement",
                raw.name,
                bus.id,
                bus.kind,
                kind
            );
            bus.kind = kind;
        }
    }
}

fn parse_cost(line: usize, row: &[f64]) -> Result<RawCost, CaseError> {
    require_cols(line, row, 4, "gencost")?;
    if row[0] as i64 != 2 {
        return Err(CaseError::Unsupported(format!("line {line}: only polynomial (model 2) costs are supported")));
    }
    let n = row[3] as usize;
    let coeffs = row.get(4..4 + n).ok_or_else(|| syntax(line, "gencost row shorter than its declared order"))?;
    // Coefficients run from highest order down to the constant term.
    let mut c = [0.0; 3];
    for (power, &v) in coeffs.iter().rev().enumerate() {
        if power > 2 {
            if v != 0.0 {
                return Err(CaseError::Unsupported(format!("line {line}: cost polynomial above quadratic order")));
            }
        } else {
            c[power] = v;
        }
    }
    Ok(RawCost { c2: c[2], c1: c[1], c0: c[0] })
}

/// Reads matrix rows starting with the text after `[` on `start_line`.
/// Returns the matrix and the index of the first unread line.
fn read_matrix(lines: &[&str], first: &str, start_line: usize, mut next: usize) -> Result<(Matrix, usize), CaseError> {
    let mut rows = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let mut current_line = start_line;
    let mut chunk = first.to_string();
    let mut chunk_line = start_line;
    loop {
        let (body, closed) = match chunk.find(']') {
            Some(pos) => (&chunk[..pos], true),
            None => (chunk.as_str(), false),
        };
        for (j, segment) in body.split(';').enumerate() {
            if j > 0 {
                flush(&mut rows, &mut current, current_line);
            }
            for token in segment.split(|c: char| c.is_whitespace() || c == ',') {
                if token.is_empty() {
                    continue;
                }
                let v = parse_number(token).ok_or_else(|| syntax(chunk_line, &format!("invalid number `{token}`")))?;
                if current.is_empty() {
                    current_line = chunk_line;
                }
                current.push(v);
            }
        }
        // A newline ends a row as well.
        flush(&mut rows, &mut current, current_line);
        if closed {
            return Ok((Matrix { rows }, next));
        }
        if next >= lines.len() {
            return Err(syntax(lines.len(), "unterminated matrix"));
        }
        chunk = strip_comment(lines[next]).to_string();
        chunk_line = next + 1;
        next += 1;
    }
}

fn flush(rows: &mut Vec<(usize, Vec<f64>)>, current: &mut Vec<f64>, line: usize) {
    if !current.is_empty() {
        rows.push((line, std::mem::take(current)));
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_number(token: &str) -> Option<f64> {
    match token {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => token.parse().ok(),
    }
}

fn require_cols(line: usize, row: &[f64], n: usize, table: &str) -> Result<(), CaseError> {
    if row.len() < n {
        return Err(syntax(line, &format!("{table} row has {} columns, expected at least {n}", row.len())));
    }
    Ok(())
}

fn as_id(line: usize, v: f64) -> Result<u32, CaseError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(syntax(line, &format!("`{v}` is not a valid bus number")))
    }
}

fn syntax(line: usize, msg: &str) -> CaseError {
    CaseError::Syntax { line, msg: msg.to_string() }
}
