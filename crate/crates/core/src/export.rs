//! CSV exports for external plotting.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;

use crate::error::Result;
use crate::gcf::EmbeddingTable;
use crate::prefdata::UserProfile;

fn group_field(group: Option<usize>) -> String {
    group.map(|g| g.to_string()).unwrap_or_default()
}

fn write_rows<W: Write>(
    out: &mut csv::Writer<W>,
    node_type: &str,
    matrix: &Array2<f64>,
    ids: impl Iterator<Item = (usize, Option<usize>)>,
) -> Result<()> {
    for (row, (id, group)) in matrix.rows().into_iter().zip(ids) {
        let mut record = vec![node_type.to_string(), id.to_string(), group_field(group)];
        record.extend(row.iter().map(|x| x.to_string()));
        out.write_record(&record)?;
    }
    Ok(())
}

/// Writes `node_type,node_id,group_id,dim_0..` rows: seen users, then
/// responses, then any extra users (e.g. adapted unseen users).
pub fn write_embeddings_csv<W: Write>(
    writer: W,
    embeddings: &EmbeddingTable,
    users: &[UserProfile],
    extra_users: Option<(&Array2<f64>, &[UserProfile])>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["node_type".to_string(), "node_id".into(), "group_id".into()];
    header.extend((0..embeddings.dim()).map(|i| format!("dim_{i}")));
    out.write_record(&header)?;
    let seen_ids = (0..embeddings.num_users()).map(|u| (u, users.get(u).and_then(|p| p.group_id)));
    write_rows(&mut out, "user", &embeddings.user_embeddings, seen_ids)?;
    write_rows(
        &mut out,
        "response",
        &embeddings.response_embeddings,
        (0..embeddings.num_responses()).map(|r| (r, None)),
    )?;
    if let Some((matrix, profiles)) = extra_users {
        write_rows(
            &mut out,
            "unseen_user",
            matrix,
            profiles.iter().map(|p| (p.user_id, p.group_id)),
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `layer,user_id,group_id,expert` rows, one per layer and user.
pub fn write_allocation_csv<W: Write>(
    writer: W,
    allocation: &[BTreeMap<usize, usize>],
    group_of: impl Fn(usize) -> Option<usize>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["layer", "user_id", "group_id", "expert"])?;
    for (layer, per_user) in allocation.iter().enumerate() {
        for (&user, &expert) in per_user {
            out.write_record([
                layer.to_string(),
                user.to_string(),
                group_field(group_of(user)),
                expert.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
