//! Prints the gradient verification table.

fn main() -> kgcm::Result<()> {
    println!("op,max_rel_error");
    for row in kgcm::gradcheck::suite(0)? {
        println!("{},{:.3e}", row.op, row.max_rel_error);
    }
    Ok(())
}
