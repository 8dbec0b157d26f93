//! Encoding, indexing and evaluation over a dataset manifest.

use crate::error::{Error, Result};
use crate::fusion::TokenSet;
use crate::io::descriptors::{DescriptorFile, DescriptorRecord, Role};
use crate::io::manifest::DatasetManifest;
use crate::io::synth::SyntheticDataset;
use crate::io::tokens::read_tokens;
use crate::model::Model;
use crate::retrieval::{recall_at_k, DescriptorIndex, EvalReport};

/// Token dimensions `(dino, clip)` of the first image in the manifest.
pub fn token_dims(manifest: &DatasetManifest) -> Result<(usize, usize)> {
    let (id, dino, clip) = manifest
        .images()
        .next()
        .ok_or_else(|| Error::invalid("manifest lists no images"))?;
    let d = read_tokens(&manifest.resolve(dino), id)?;
    let c = read_tokens(&manifest.resolve(clip), id)?;
    Ok((d.dim(), c.dim()))
}

/// Encodes images given as `(id, role, dino, clip)`.
pub fn encode_images<'a, I>(model: &Model, images: I) -> Result<DescriptorFile>
where
    I: IntoIterator<Item = (&'a str, Role, &'a TokenSet, &'a TokenSet)>,
{
    let mut out = DescriptorFile {
        dim: model.config.descriptor_dim(),
        records: Vec::new(),
    };
    for (id, role, dino, clip) in images {
        let values = model.encode(dino, clip)?;
        out.records.push(DescriptorRecord {
            id: id.to_string(),
            role,
            values,
        });
    }
    Ok(out)
}

/// One record per manifest image, database entries first.
pub fn encode_manifest(model: &Model, manifest: &DatasetManifest) -> Result<DescriptorFile> {
    let n_db = manifest.database.len();
    let mut out = DescriptorFile {
        dim: model.config.descriptor_dim(),
        records: Vec::new(),
    };
    for (i, (id, dino, clip)) in manifest.images().enumerate() {
        let (d, c) = manifest.load_pair(id, dino, clip)?;
        let role = if i < n_db { Role::Database } else { Role::Query };
        let values = model.encode(&d, &c)?;
        out.records.push(DescriptorRecord {
            id: id.to_string(),
            role,
            values,
        });
    }
    Ok(out)
}

pub fn encode_synthetic(model: &Model, ds: &SyntheticDataset) -> Result<DescriptorFile> {
    encode_images(
        model,
        ds.database()
            .map(|i| (i.id.as_str(), Role::Database, &i.dino, &i.clip))
            .chain(ds.queries().map(|i| (i.id.as_str(), Role::Query, &i.dino, &i.clip))),
    )
}

pub fn build_index(file: &DescriptorFile) -> Result<DescriptorIndex> {
    DescriptorIndex::build(file.with_role(Role::Database).map(|r| (r.id.clone(), r.values.clone())))
}

/// Recall@K of the query records against the database records.
pub fn evaluate(file: &DescriptorFile, manifest: &DatasetManifest, ks: &[usize]) -> Result<EvalReport> {
    let index = build_index(file)?;
    let queries: Vec<(String, Vec<f32>)> = file
        .with_role(Role::Query)
        .map(|r| (r.id.clone(), r.values.clone()))
        .collect();
    for q in &manifest.query {
        if !queries.iter().any(|(id, _)| *id == q.id) {
            return Err(Error::invalid(format!("no descriptor for query {}", q.id)));
        }
    }
    recall_at_k(manifest.dataset_name(), &index, &queries, &manifest.positives(), ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::HeadConfig;
    use crate::fusion::FusionVariant;
    use crate::io::synth::{generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;

    #[test]
    fn manifest_and_in_memory_encodings_agree() {
        let ds = generate_synthetic(&SynthSpec {
            places: 3,
            images_per_place: 2,
            dim: 4,
            tokens: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.write(dir.path()).unwrap();
        let loaded = DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(token_dims(&loaded).unwrap(), (4, 4));
        let model = Model::init(
            ModelConfig {
                dino_dim: 4,
                clip_dim: 4,
                fusion: FusionVariant::Residual,
                head: HeadConfig {
                    blocks: 1,
                    queries_per_block: 2,
                    ..HeadConfig::default()
                },
            },
            0,
        )
        .unwrap();
        let a = encode_manifest(&model, &loaded).unwrap();
        let b = encode_synthetic(&model, &ds).unwrap();
        assert_eq!(a, b);
        let r = evaluate(&a, &manifest, &[1, 2]).unwrap();
        assert_eq!(r.num_queries, 3);
        assert!(r.is_monotone());
    }
}
