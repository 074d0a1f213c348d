//! Bundled parameter and state tables, checksummed at load time.
//!
//! Keys are slash separated: `EMCparams/g0_hz`, `qubitcavparams/chi_hz`,
//! `densityMatrices/input/2`, `errorsNthRho/0.10/e`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::DeviceParams;
use crate::error::{Error, Result};
use crate::fock::{min_eigenvalue, CMatrix, DensityMatrix};

const DENSITY_MATRICES: &str = include_str!("../data/densityMatrices.json");
const EMC_PARAMS: &str = include_str!("../data/EMCparams.json");
const QUBIT_CAV_PARAMS: &str = include_str!("../data/qubitcavparams.json");
const ERRORS_NTH_RHO: &str = include_str!("../data/errorsNthRho.json");

const SOURCES: [(&str, &str, &str); 4] = [
    (
        "densityMatrices",
        DENSITY_MATRICES,
        "a9a071ac7952c256b88ace64ac2a2018da5bc48c598d5933113ca081859ee6a9",
    ),
    (
        "EMCparams",
        EMC_PARAMS,
        "606f488fe8f6457488d30e01af1158cb951fea404043f1a5040b9c2c472f007f",
    ),
    (
        "qubitcavparams",
        QUBIT_CAV_PARAMS,
        "cbe447ab898538b54f0a9c31f96d189fdaa873fd6c94dcaf57ce36ae05a4f6f0",
    ),
    (
        "errorsNthRho",
        ERRORS_NTH_RHO,
        "e6224b78ff499f7271f2f86f266c25f96476905c3904f4b18b006e0aba1fb655",
    ),
];

/// Hex SHA-256 of `bytes`, checked against `expected`.
pub fn verify_checksum(name: &str, bytes: &[u8], expected: &str) -> Result<String> {
    let got = hex::encode(Sha256::digest(bytes));
    if got != expected {
        return Err(Error::ChecksumMismatch { name: name.to_string() });
    }
    Ok(got)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub key: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
    /// `upper` or `approximate` when the table gives a bound or estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<String>,
    pub unit: String,
    pub description: String,
}

#[derive(Debug, Clone, Deserialize)]
struct ParamTable {
    parameters: Vec<Parameter>,
}

#[derive(Debug, Clone, Deserialize)]
struct MatrixEntry {
    index: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
struct DensityTable {
    input: Vec<MatrixEntry>,
    output: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NthRow {
    pub n_th: f64,
    /// Electrical diagonal `[ρ_e]₀₀, [ρ_e]₁₁, [ρ_e]₂₂`.
    pub e: [f64; 3],
    /// Mechanical diagonal.
    pub m: [f64; 3],
}

#[derive(Debug, Clone, Deserialize)]
struct NthTable {
    rows: Vec<NthRow>,
}

/// How a tabulated block becomes a [`DensityMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedPolicy {
    /// Divide by the trace; negative eigenvalues are an error.
    Renormalize,
    /// Clip negative eigenvalues, then renormalize.
    #[default]
    Physical,
}

/// A tabulated block zero-padded into a larger space.
#[derive(Debug, Clone)]
pub struct EmbeddedState {
    pub matrix: CMatrix,
    /// `1 − tr`.
    pub trace_deficit: f64,
    pub min_eigenvalue: f64,
}

impl EmbeddedState {
    pub fn to_density(&self, policy: EmbedPolicy) -> Result<DensityMatrix> {
        match policy {
            EmbedPolicy::Renormalize => {
                let tr = 1.0 - self.trace_deficit;
                DensityMatrix::from_matrix(self.matrix.unscale(tr))
            }
            EmbedPolicy::Physical => DensityMatrix::from_clipped(self.matrix.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    emc: Vec<Parameter>,
    qubit: Vec<Parameter>,
    inputs: Vec<CMatrix>,
    outputs: Vec<CMatrix>,
    nth: Vec<NthRow>,
    checksums: BTreeMap<String, String>,
}

fn to_matrix(e: &MatrixEntry) -> Result<CMatrix> {
    let d = e.re.len();
    if e.im.len() != d || e.re.iter().chain(&e.im).any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(format!("matrix {} is not square", e.index)));
    }
    Ok(CMatrix::from_fn(d, d, |i, j| Complex64::new(e.re[i][j], e.im[i][j])))
}

fn ordered(entries: &[MatrixEntry]) -> Result<Vec<CMatrix>> {
    let mut v: Vec<&MatrixEntry> = entries.iter().collect();
    v.sort_by_key(|e| e.index);
    v.into_iter().map(to_matrix).collect()
}

/// Loads and verifies every bundled table.
pub fn fixtures() -> Result<Fixtures> {
    let mut checksums = BTreeMap::new();
    for (name, text, sha) in SOURCES {
        checksums.insert(name.to_string(), verify_checksum(name, text.as_bytes(), sha)?);
    }
    let dm: DensityTable = serde_json::from_str(DENSITY_MATRICES)?;
    let emc: ParamTable = serde_json::from_str(EMC_PARAMS)?;
    let qubit: ParamTable = serde_json::from_str(QUBIT_CAV_PARAMS)?;
    let nth: NthTable = serde_json::from_str(ERRORS_NTH_RHO)?;
    Ok(Fixtures {
        emc: emc.parameters,
        qubit: qubit.parameters,
        inputs: ordered(&dm.input)?,
        outputs: ordered(&dm.output)?,
        nth: nth.rows,
        checksums,
    })
}

impl Fixtures {
    pub fn checksums(&self) -> &BTreeMap<String, String> {
        &self.checksums
    }

    pub fn keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        keys.extend(self.emc.iter().map(|p| format!("EMCparams/{}", p.key)));
        keys.extend(self.qubit.iter().map(|p| format!("qubitcavparams/{}", p.key)));
        for side in ["input", "output"] {
            keys.extend((1..=self.inputs.len()).map(|i| format!("densityMatrices/{side}/{i}")));
        }
        for r in &self.nth {
            for side in ["e", "m"] {
                keys.push(format!("errorsNthRho/{:.2}/{side}", r.n_th));
            }
        }
        keys
    }

    pub fn parameter(&self, key: &str) -> Result<&Parameter> {
        let (table, name) = key
            .split_once('/')
            .ok_or_else(|| Error::UnknownFixture(key.to_string()))?;
        let list = match table {
            "EMCparams" => &self.emc,
            "qubitcavparams" => &self.qubit,
            _ => return Err(Error::UnknownFixture(key.to_string())),
        };
        list.iter()
            .find(|p| p.key == name)
            .ok_or_else(|| Error::UnknownFixture(key.to_string()))
    }

    pub fn scalar(&self, key: &str) -> Result<f64> {
        Ok(self.parameter(key)?.value)
    }

    /// The tabulated 3×3 block for `densityMatrices/{input,output}/{1..4}`.
    pub fn density_block(&self, key: &str) -> Result<CMatrix> {
        let unknown = || Error::UnknownFixture(key.to_string());
        let mut parts = key.split('/');
        if parts.next() != Some("densityMatrices") {
            return Err(unknown());
        }
        let list = match parts.next() {
            Some("input") => &self.inputs,
            Some("output") => &self.outputs,
            _ => return Err(unknown()),
        };
        let idx: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
        if parts.next().is_some() || idx == 0 || idx > list.len() {
            return Err(unknown());
        }
        Ok(list[idx - 1].clone())
    }

    /// Zero-pads the block into `dim` and reports its trace deficit.
    pub fn embedded(&self, key: &str, dim: usize) -> Result<EmbeddedState> {
        let block = self.density_block(key)?;
        let d = block.nrows();
        if dim < d {
            return Err(Error::DimensionMismatch { expected: d, got: dim });
        }
        let mut m = CMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (d, d)).copy_from(&block);
        Ok(EmbeddedState {
            trace_deficit: 1.0 - m.trace().re,
            min_eigenvalue: min_eigenvalue(&m),
            matrix: m,
        })
    }

    pub fn density_matrix(&self, key: &str, dim: usize, policy: EmbedPolicy) -> Result<DensityMatrix> {
        self.embedded(key, dim)?.to_density(policy)
    }

    /// Any state fixture: `densityMatrices/...` or the diagonal state
    /// `errorsNthRho/<n_th>/<e|m>`.
    pub fn state(&self, key: &str, dim: usize, policy: EmbedPolicy) -> Result<DensityMatrix> {
        if key.starts_with("densityMatrices/") {
            return self.density_matrix(key, dim, policy);
        }
        let unknown = || Error::UnknownFixture(key.to_string());
        let mut parts = key.split('/');
        if parts.next() != Some("errorsNthRho") {
            return Err(unknown());
        }
        let n_th: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
        let row = self.nth_row(n_th).map_err(|_| unknown())?;
        let diag = match (parts.next(), parts.next()) {
            (Some("e"), None) => row.e,
            (Some("m"), None) => row.m,
            _ => return Err(unknown()),
        };
        if dim < 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: dim });
        }
        // Rows are rounded and sum to slightly less than one.
        let total: f64 = diag.iter().sum();
        let mut p = vec![0.0; dim];
        for (dst, v) in p.iter_mut().zip(diag) {
            *dst = v / total;
        }
        DensityMatrix::from_populations(&p)
    }

    /// The four tabulated (input, output) blocks, in table order.
    pub fn density_pairs(&self) -> (Vec<CMatrix>, Vec<CMatrix>) {
        (self.inputs.clone(), self.outputs.clone())
    }

    pub fn nth_rows(&self) -> &[NthRow] {
        &self.nth
    }

    pub fn nth_row(&self, n_th: f64) -> Result<&NthRow> {
        self.nth
            .iter()
            .find(|r| (r.n_th - n_th).abs() < 1e-9)
            .ok_or_else(|| Error::UnknownFixture(format!("errorsNthRho/{n_th}")))
    }

    /// Device parameters with `η = κ_ext/κ_LC`.
    pub fn device_params(&self) -> Result<DeviceParams> {
        let w = |k: &str| -> Result<f64> { Ok(2.0 * PI * self.scalar(&format!("EMCparams/{k}"))?) };
        DeviceParams::new(
            w("omega_m_hz")?,
            w("kappa_m_hz")?,
            w("kappa_lc_hz")?,
            w("kappa_ext_hz")?,
            w("g0_hz")?,
            self.scalar("EMCparams/n_m")?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_load_and_verify() {
        let f = fixtures().unwrap();
        assert_eq!(f.scalar("EMCparams/g0_hz").unwrap(), 283.0);
        assert_eq!(f.scalar("qubitcavparams/chi_hz").unwrap(), 3.413e6);
        assert_eq!(f.checksums().len(), 4);
        assert!(f.scalar("EMCparams/nope").is_err());
        assert!(f.density_block("densityMatrices/input/5").is_err());
        assert_eq!(f.nth_row(0.10).unwrap().m, [0.683, 0.264, 0.050]);
        let m = f.state("errorsNthRho/0.10/m", 16, EmbedPolicy::Physical).unwrap();
        assert!((m.element(1, 1).re - 0.264 / 0.997).abs() < 1e-12);
        assert!(f.state("errorsNthRho/0.10/x", 16, EmbedPolicy::Physical).is_err());
        for key in f.keys().iter().filter(|k| !k.contains("params")) {
            f.state(key, 16, EmbedPolicy::Physical).unwrap();
        }
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let (name, text, sha) = SOURCES[1];
        let tampered = text.replace("283", "284");
        assert!(matches!(
            verify_checksum(name, tampered.as_bytes(), sha),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn input_two_diagonal() {
        let f = fixtures().unwrap();
        let e = f.embedded("densityMatrices/input/2", 16).unwrap();
        let diag: Vec<f64> = (0..3).map(|i| e.matrix[(i, i)].re).collect();
        assert_eq!(diag, vec![0.660, 0.283, 0.042]);
        assert!((e.trace_deficit - 0.015).abs() < 1e-12);
    }

    #[test]
    fn every_state_embeds() {
        let f = fixtures().unwrap();
        for key in f.keys().iter().filter(|k| k.starts_with("densityMatrices")) {
            let e = f.embedded(key, 16).unwrap();
            assert!(e.trace_deficit.abs() < 0.02, "{key}");
            let rho = e.to_density(EmbedPolicy::Physical).unwrap();
            assert!((rho.trace() - 1.0).abs() < 1e-10);
        }
        // Input 1 has a slightly negative eigenvalue.
        let e = f.embedded("densityMatrices/input/1", 16).unwrap();
        assert!(e.min_eigenvalue < 0.0);
        assert!(e.to_density(EmbedPolicy::Renormalize).is_err());
    }

    #[test]
    fn device_params_match_measured() {
        let p = fixtures().unwrap().device_params().unwrap();
        let m = DeviceParams::measured();
        assert!((p.g0 - m.g0).abs() < 1e-9);
        assert!((p.eta - m.eta).abs() < 1e-12);
    }
}
