//! Synthetic corpus modeled on a withdraw function whose safety depends only on
//! statement order: the vulnerable variant transfers funds before locking the
//! caller and updating the balance, the safe variant locks and updates first.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{LabeledExample, Labels, Task};
use crate::error::{ClearError, Result};
use crate::rng::{self, Rng};

const CONTRACT_NAMES: &[&str] = &[
    "Bank", "Vault", "Wallet", "Escrow", "Fund", "Treasury", "Pool", "Reserve", "Savings",
    "Deposit",
];
const BALANCE_NAMES: &[&str] = &[
    "balances",
    "balanceOf",
    "userBalance",
    "credit",
    "deposits",
    "funds",
    "accounts",
    "ledger",
];
const LOCK_NAMES: &[&str] = &[
    "locked",
    "isLocked",
    "mutex",
    "busy",
    "inProgress",
    "guard",
    "pending",
    "frozen",
];
const AMOUNT_NAMES: &[&str] = &["amount", "value_", "wad", "amt", "qty", "sum"];
const WITHDRAW_NAMES: &[&str] = &[
    "withdrawFunds",
    "withdraw",
    "claim",
    "cashOut",
    "payout",
    "redeem",
    "release",
    "collect",
];
const EVENT_NAMES: &[&str] = &["Withdrawal", "Paid", "Released", "LogWithdraw"];

/// One generated contract plus the name of its order-sensitive function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthContract {
    pub source: String,
    pub critical_function: String,
}

struct Names<'a> {
    balance: &'a str,
    lock: &'a str,
    amount: &'a str,
    event: &'a str,
}

fn pick<'a>(rng: &mut Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn filler(kind: usize, rng: &mut Rng, n: &Names) -> String {
    let (bal, lock) = (n.balance, n.lock);
    match kind {
        0 => format!("function deposit() public payable {{ {bal}[msg.sender] += msg.value; }}"),
        1 => format!(
            "function getBalance(address who) public view returns (uint256) {{ return {bal}[who]; }}"
        ),
        2 => "function setOwner(address next) public { require(msg.sender == owner); owner = next; }"
            .to_string(),
        3 => "function sweep(address to, uint256 v) public { require(msg.sender == owner); to.call.value(v)(); }"
            .to_string(),
        4 => "function pause() public { require(msg.sender == owner); paused = true; }".to_string(),
        5 => format!(
            "function isOpen() public view returns (bool) {{ return now > {}; }}",
            rng.gen_range(1_500_000_000u64..1_700_000_000)
        ),
        6 => "function add(uint256 a, uint256 b) internal pure returns (uint256) { uint256 c = a + b; require(c >= a); return c; }"
            .to_string(),
        7 => format!(
            "function reset(address who) public {{ require(msg.sender == owner); {lock}[who] = false; }}"
        ),
        _ => format!(
            "function total(uint256 n) public pure returns (uint256 s) {{ for (uint256 i = 0; i < n; i++) {{ s += i * {}; }} }}",
            rng.gen_range(2u32..100)
        ),
    }
}
const FILLER_KINDS: usize = 9;

/// Generate the template instance for `(seed, index)`. The instance (names,
/// fillers, literals, layout) depends only on `(seed, index)`; `vulnerable`
/// only changes the statement order inside the critical function.
pub fn generate_contract(seed: u64, index: u64, vulnerable: bool) -> SynthContract {
    let mut rng = rng::stream(seed, rng::SYNTH, index);
    let names = Names {
        balance: pick(&mut rng, BALANCE_NAMES),
        lock: pick(&mut rng, LOCK_NAMES),
        amount: pick(&mut rng, AMOUNT_NAMES),
        event: pick(&mut rng, EVENT_NAMES),
    };
    let contract_name = pick(&mut rng, CONTRACT_NAMES);
    let withdraw_name = pick(&mut rng, WITHDRAW_NAMES);
    let Names {
        balance: bal,
        lock,
        amount: amt,
        event,
    } = names;

    let mut decls = [
        format!("mapping(address => uint256) {bal};"),
        format!("mapping(address => bool) {lock};"),
        "address owner;".to_string(),
        "bool paused;".to_string(),
        format!("event {event}(address who, uint256 v);"),
    ];
    decls.shuffle(&mut rng);

    let transfer = match rng.gen_range(0..3) {
        0 => format!("msg.sender.call.value({amt})();"),
        1 => format!("require(msg.sender.call.value({amt})());"),
        _ => format!("(bool ok, ) = msg.sender.call{{value: {amt}}}(\"\"); require(ok);"),
    };
    let lock_stmt = format!("{lock}[msg.sender] = true;");
    let update = if rng.gen_bool(0.5) {
        format!("{bal}[msg.sender] -= {amt};")
    } else {
        format!("{bal}[msg.sender] = {bal}[msg.sender] - {amt};")
    };
    let mut checks = vec![
        format!("require(!{lock}[msg.sender]);"),
        format!("require({bal}[msg.sender] >= {amt});"),
    ];
    checks.shuffle(&mut rng);
    let mut guarded = vec![lock_stmt, update];
    guarded.shuffle(&mut rng);
    let unlock = rng
        .gen_bool(0.7)
        .then(|| format!("{lock}[msg.sender] = false;"));
    let emit = rng
        .gen_bool(0.5)
        .then(|| format!("emit {event}(msg.sender, {amt});"));

    let mut body: Vec<String> = checks;
    if vulnerable {
        body.push(transfer);
        body.extend(guarded);
    } else {
        body.extend(guarded);
        body.push(transfer);
    }
    body.extend(unlock);
    body.extend(emit);
    let withdraw = format!(
        "function {withdraw_name}(uint256 {amt}) public {{\n        {}\n    }}",
        body.join("\n        ")
    );

    let mut kinds: Vec<usize> = (0..FILLER_KINDS).collect();
    kinds.shuffle(&mut rng);
    let n_fillers = rng.gen_range(0..=1);
    let mut functions: Vec<String> = kinds[..n_fillers]
        .iter()
        .map(|&k| filler(k, &mut rng, &names))
        .collect();
    let at = rng.gen_range(0..=functions.len());
    functions.insert(at, withdraw);

    let source = format!(
        "pragma solidity ^0.4.{};\n\ncontract {contract_name} {{\n    {}\n\n    {}\n}}\n",
        rng.gen_range(11..26),
        decls.join("\n    "),
        functions.join("\n\n    "),
    );
    SynthContract {
        source,
        critical_function: withdraw_name.to_string(),
    }
}

/// `n` contracts of which `round(n * vuln_fraction)` carry `ORDER = 1`.
pub fn generate_synthetic_corpus(
    n: usize,
    vuln_fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if n < 10 {
        return Err(ClearError::invalid(format!(
            "synthetic corpus needs n >= 10, got {n}"
        )));
    }
    if !(vuln_fraction > 0.0 && vuln_fraction < 1.0) {
        return Err(ClearError::invalid(format!(
            "vuln_fraction must lie in (0, 1), got {vuln_fraction}"
        )));
    }
    let n_vuln = (n as f64 * vuln_fraction).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < n_vuln).collect();
    flags.shuffle(&mut rng::stream(seed, rng::SYNTH_LABELS, 0));
    Ok(flags
        .into_iter()
        .enumerate()
        .map(|(i, vulnerable)| {
            let c = generate_contract(seed, i as u64, vulnerable);
            LabeledExample {
                id: format!("synth-{seed}-{i:05}"),
                source: c.source,
                labels: Labels::from([(Task::Order, vulnerable as u8)]),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    /// Token range of the body of `function <name>`, found by brace matching.
    fn function_range(tokens: &[String], name: &str) -> (usize, usize) {
        let start = tokens
            .windows(2)
            .position(|w| w[0] == "function" && w[1] == name)
            .expect("critical function present");
        let open = start + tokens[start..].iter().position(|t| t == "{").unwrap();
        let mut depth = 0;
        for (i, t) in tokens.iter().enumerate().skip(open) {
            match t.as_str() {
                "{" => depth += 1,
                "}" => {
                    depth -= 1;
                    if depth == 0 {
                        return (open, i);
                    }
                }
                _ => {}
            }
        }
        panic!("unbalanced braces");
    }

    fn sorted(mut v: Vec<String>) -> Vec<String> {
        v.sort();
        v
    }

    #[test]
    fn counts_and_determinism() {
        let a = generate_synthetic_corpus(500, 0.3, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(
            a.iter().filter(|e| e.label(Task::Order) == Some(1)).count(),
            150
        );
        let b = generate_synthetic_corpus(500, 0.3, 7).unwrap();
        assert_eq!(
            super::super::corpus_to_jsonl(&a),
            super::super::corpus_to_jsonl(&b)
        );
        assert_ne!(a, generate_synthetic_corpus(500, 0.3, 8).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic_corpus(9, 0.3, 0).is_err());
        assert!(generate_synthetic_corpus(100, 0.0, 0).is_err());
        assert!(generate_synthetic_corpus(100, 1.0, 0).is_err());
    }

    #[test]
    fn variants_differ_only_in_critical_order() {
        for index in 0..1000u64 {
            let vuln = generate_contract(11, index, true);
            let safe = generate_contract(11, index, false);
            assert_eq!(vuln.critical_function, safe.critical_function);
            let tv = tokenize(&vuln.source);
            let ts = tokenize(&safe.source);
            assert_eq!(
                sorted(tv.clone()),
                sorted(ts.clone()),
                "multiset differs at {index}"
            );
            assert_ne!(tv, ts);

            let (v0, v1) = function_range(&tv, &vuln.critical_function);
            let (s0, s1) = function_range(&ts, &safe.critical_function);
            assert_eq!((v0, v1), (s0, s1));
            assert_eq!(tv[..v0], ts[..s0]);
            assert_eq!(tv[v1..], ts[s1..]);
        }
    }

    #[test]
    fn transfer_position_tracks_label() {
        for index in 0..50u64 {
            for vulnerable in [true, false] {
                let c = generate_contract(3, index, vulnerable);
                let toks = tokenize(&c.source);
                let (lo, hi) = function_range(&toks, &c.critical_function);
                let body = &toks[lo..hi];
                let call = body.iter().position(|t| t == "call").unwrap();
                let lock = body
                    .windows(2)
                    .position(|w| w[0] == "=" && w[1] == "true")
                    .unwrap();
                assert_eq!(call < lock, vulnerable);
            }
        }
    }
}
