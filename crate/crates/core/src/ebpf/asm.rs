//! Text assembler and disassembler, one instruction per line, kernel-style
//! mnemonics:
//!
//! ```text
//! mov64 r0, 42        ; `mov` is an alias of `mov64`
//! ldxdw r1, [r10-8]
//! stxw [r10-4], r1
//! jeq r1, 5, +2       ; jump targets are `+N`/`-N` or a label
//! loop: add64 r1, 1
//! lddw r2, 0x1122334455667788
//! call 3
//! exit
//! ```
//!
//! Comments start with `;`, `#` or `//`.

use std::collections::HashMap;

use thiserror::Error;

use super::insn::{build, AluOp, Cond, Insn, Op, Operand, Program, Size};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

fn err(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError {
        line,
        msg: msg.into(),
    }
}

enum Target {
    Rel(i64),
    Label(String),
}

struct Pending {
    line: usize,
    slot: usize,
    target: Target,
}

fn strip_comment(line: &str) -> &str {
    let mut end = line.len();
    for pat in [";", "#", "//"] {
        if let Some(i) = line.find(pat) {
            end = end.min(i);
        }
    }
    line[..end].trim()
}

fn parse_reg(s: &str, line: usize) -> Result<u8, AsmError> {
    let s = s.trim();
    let n = s
        .strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| n <= 10)
        .ok_or_else(|| err(line, format!("bad register `{s}`")))?;
    Ok(n)
}

fn parse_int(s: &str, line: usize) -> Result<i64, AsmError> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        body.parse::<u64>()
    }
    .map_err(|_| err(line, format!("bad integer `{s}`")))?;
    Ok(if neg {
        (v as i64).wrapping_neg()
    } else {
        v as i64
    })
}

fn parse_imm32(s: &str, line: usize) -> Result<i32, AsmError> {
    let v = parse_int(s, line)?;
    if v < i32::MIN as i64 || v > u32::MAX as i64 {
        return Err(err(line, format!("immediate `{s}` does not fit 32 bits")));
    }
    Ok(v as i32)
}

fn parse_operand(s: &str, line: usize) -> Result<Operand, AsmError> {
    if s.trim().starts_with('r') {
        Ok(Operand::Reg(parse_reg(s, line)?))
    } else {
        Ok(Operand::Imm(parse_imm32(s, line)?))
    }
}

/// Parses `[rN+off]` / `[rN-off]` / `[rN]`.
fn parse_mem(s: &str, line: usize) -> Result<(u8, i16), AsmError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| err(line, format!("bad memory operand `{s}`")))?;
    let split = inner.find(['+', '-']);
    let (reg, off) = match split {
        Some(i) => (&inner[..i], parse_int(&inner[i..], line)?),
        None => (inner, 0),
    };
    let off = i16::try_from(off).map_err(|_| err(line, "memory offset out of range"))?;
    Ok((parse_reg(reg, line)?, off))
}

fn parse_target(s: &str, line: usize) -> Result<Target, AsmError> {
    let s = s.trim();
    if s.starts_with('+') || s.starts_with('-') || s.chars().all(|c| c.is_ascii_digit()) {
        Ok(Target::Rel(parse_int(s, line)?))
    } else if s
        .chars()
        .all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !s.is_empty()
    {
        Ok(Target::Label(s.to_string()))
    } else {
        Err(err(line, format!("bad jump target `{s}`")))
    }
}

fn size_from_suffix(s: &str) -> Option<Size> {
    Some(match s {
        "b" => Size::B,
        "h" => Size::H,
        "w" => Size::W,
        "dw" => Size::DW,
        _ => return None,
    })
}

/// Assembles text into raw instruction slots.
pub fn assemble_insns(text: &str) -> Result<Vec<Insn>, AsmError> {
    let mut insns: Vec<Insn> = Vec::new();
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<Pending> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut rest = strip_comment(raw);
        while let Some(colon) = rest.find(':') {
            let label = rest[..colon].trim();
            if label.is_empty()
                || !label
                    .chars()
                    .all(|c| c.is_alphanumeric() || c == '_' || c == '.')
            {
                break;
            }
            if labels.insert(label.to_string(), insns.len()).is_some() {
                return Err(err(line, format!("duplicate label `{label}`")));
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        let (mnemonic, args) = match rest.find(char::is_whitespace) {
            Some(i) => (&rest[..i], rest[i..].trim()),
            None => (rest, ""),
        };
        let args: Vec<&str> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').map(str::trim).collect()
        };
        let want = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(err(line, format!("`{mnemonic}` takes {n} operand(s)")))
            }
        };

        match mnemonic {
            "exit" => {
                want(0)?;
                insns.push(build::exit());
            }
            "call" => {
                want(1)?;
                let id = parse_int(args[0], line)?;
                let id = u32::try_from(id).map_err(|_| err(line, "bad helper id"))?;
                insns.push(build::call(id));
            }
            "ja" => {
                want(1)?;
                pending.push(Pending {
                    line,
                    slot: insns.len(),
                    target: parse_target(args[0], line)?,
                });
                insns.push(build::ja(0));
            }
            "lddw" => {
                want(2)?;
                let dst = parse_reg(args[0], line)?;
                let imm = parse_int(args[1], line)? as u64;
                insns.extend(build::lddw(dst, imm));
            }
            "neg" | "neg64" | "neg32" => {
                want(1)?;
                insns.push(build::neg(mnemonic != "neg32", parse_reg(args[0], line)?));
            }
            m if (m.starts_with("le") || m.starts_with("be")) && m[2..].parse::<i32>().is_ok() => {
                want(1)?;
                let bits = m[2..].parse::<i32>().unwrap();
                if !matches!(bits, 16 | 32 | 64) {
                    return Err(err(line, "endian width must be 16, 32 or 64"));
                }
                insns.push(build::endian(
                    m.starts_with("be"),
                    bits,
                    parse_reg(args[0], line)?,
                ));
            }
            m if m.starts_with("ldx") => {
                want(2)?;
                let size =
                    size_from_suffix(&m[3..]).ok_or_else(|| err(line, format!("unknown `{m}`")))?;
                let dst = parse_reg(args[0], line)?;
                let (base, off) = parse_mem(args[1], line)?;
                insns.push(build::ldx(size, dst, base, off));
            }
            m if m.starts_with("stx") => {
                want(2)?;
                let size =
                    size_from_suffix(&m[3..]).ok_or_else(|| err(line, format!("unknown `{m}`")))?;
                let (base, off) = parse_mem(args[0], line)?;
                let src = parse_reg(args[1], line)?;
                insns.push(build::stx(size, base, off, src));
            }
            m if m.starts_with("st") && size_from_suffix(&m[2..]).is_some() => {
                want(2)?;
                let size = size_from_suffix(&m[2..]).unwrap();
                let (base, off) = parse_mem(args[0], line)?;
                insns.push(build::st(size, base, off, parse_imm32(args[1], line)?));
            }
            m if m.starts_with('j') => {
                want(3)?;
                let (stem, wide) = match m.strip_suffix("32") {
                    Some(s) => (s, false),
                    None => (m, true),
                };
                let cond = Cond::ALL
                    .into_iter()
                    .find(|c| c.mnemonic() == stem)
                    .ok_or_else(|| err(line, format!("unknown jump `{m}`")))?;
                let lhs = parse_reg(args[0], line)?;
                let rhs = parse_operand(args[1], line)?;
                pending.push(Pending {
                    line,
                    slot: insns.len(),
                    target: parse_target(args[2], line)?,
                });
                insns.push(build::branch(wide, cond, lhs, rhs, 0));
            }
            m => {
                let (stem, wide) = if let Some(s) = m.strip_suffix("64") {
                    (s, true)
                } else if let Some(s) = m.strip_suffix("32") {
                    (s, false)
                } else {
                    (m, true)
                };
                let op = AluOp::ALL
                    .into_iter()
                    .find(|o| o.mnemonic() == stem)
                    .ok_or_else(|| err(line, format!("unknown mnemonic `{m}`")))?;
                want(2)?;
                let dst = parse_reg(args[0], line)?;
                let src = parse_operand(args[1], line)?;
                insns.push(if wide {
                    build::alu64(op, dst, src)
                } else {
                    build::alu32(op, dst, src)
                });
            }
        }
    }

    for p in pending {
        let target = match p.target {
            Target::Rel(off) => p.slot as i64 + 1 + off,
            Target::Label(name) => *labels
                .get(&name)
                .ok_or_else(|| err(p.line, format!("undefined label `{name}`")))?
                as i64,
        };
        let off = target - (p.slot as i64 + 1);
        insns[p.slot].off =
            i16::try_from(off).map_err(|_| err(p.line, "jump offset out of range"))?;
    }
    Ok(insns)
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error(transparent)]
    Syntax(#[from] AsmError),
    #[error(transparent)]
    Decode(#[from] super::insn::DecodeError),
}

/// Assembles text into a loaded [`Program`].
pub fn assemble(name: &str, text: &str) -> Result<Program, AssembleError> {
    let insns = assemble_insns(text)?;
    Ok(Program::from_insns(name, insns)?)
}

fn operand(o: Operand) -> String {
    match o {
        Operand::Reg(r) => format!("r{r}"),
        Operand::Imm(i) => format!("{i}"),
    }
}

fn mem(base: u8, off: i16) -> String {
    if off < 0 {
        format!("[r{base}{off}]")
    } else {
        format!("[r{base}+{off}]")
    }
}

fn rel(off: i16) -> String {
    if off < 0 {
        format!("{off}")
    } else {
        format!("+{off}")
    }
}

/// Renders one decoded op.
pub fn format_op(op: &Op) -> Option<String> {
    Some(match *op {
        Op::Alu { wide, op, dst, src } => {
            format!(
                "{}{} r{dst}, {}",
                op.mnemonic(),
                if wide { 64 } else { 32 },
                operand(src)
            )
        }
        Op::Neg { wide, dst } => format!("neg{} r{dst}", if wide { 64 } else { 32 }),
        Op::Endian { to_be, bits, dst } => {
            format!("{}{bits} r{dst}", if to_be { "be" } else { "le" })
        }
        Op::LoadImm64 { dst, imm } => format!("lddw r{dst}, {imm:#x}"),
        Op::Load {
            size,
            dst,
            base,
            off,
        } => format!("ldx{} r{dst}, {}", size.suffix(), mem(base, off)),
        Op::Store {
            size,
            base,
            off,
            src: Operand::Reg(r),
        } => format!("stx{} {}, r{r}", size.suffix(), mem(base, off)),
        Op::Store {
            size,
            base,
            off,
            src: Operand::Imm(i),
        } => format!("st{} {}, {i}", size.suffix(), mem(base, off)),
        Op::Jump { off } => format!("ja {}", rel(off)),
        Op::Branch {
            wide,
            cond,
            lhs,
            rhs,
            off,
        } => format!(
            "{}{} r{lhs}, {}, {}",
            cond.mnemonic(),
            if wide { "" } else { "32" },
            operand(rhs),
            rel(off)
        ),
        Op::Call { helper } => format!("call {helper}"),
        Op::Exit => "exit".to_string(),
        Op::Filler => return None,
    })
}

/// Disassembles a program; the output re-assembles to the same bytes.
pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    for op in program.ops() {
        if let Some(line) = format_op(op) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembles_with_labels() {
        let p = assemble(
            "t",
            "
            mov r1, 0
            loop: add64 r1, 1     ; bump
            jlt r1, 10, loop
            mov64 r0, r1
            exit
            ",
        )
        .unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(
            p.ops()[2],
            Op::Branch {
                wide: true,
                cond: Cond::Lt,
                lhs: 1,
                rhs: Operand::Imm(10),
                off: -2
            }
        );
    }

    #[test]
    fn disassembly_round_trips() {
        let text = "lddw r2, 0x1122334455667788
ldxdw r1, [r10-8]
stxw [r10-4], r1
stb [r2+3], -1
jeq32 r1, r2, +1
be16 r3
neg32 r4
call 5
ja -3
mod32 r1, 7
exit
";
        let p = assemble("t", text).unwrap();
        let again = assemble("t", &disassemble(&p)).unwrap();
        assert_eq!(p.encode(), again.encode());
    }

    #[test]
    fn reports_line_numbers() {
        let e = assemble_insns("mov r0, 1\nfrob r1, 2\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = assemble_insns("ja nowhere\n").unwrap_err();
        assert!(e.msg.contains("undefined label"));
        assert!(assemble_insns("mov r11, 1").is_err());
    }
}
