//! Records a small network on the tape, backpropagates, and compares one
//! gradient entry against a central difference.

use tsg::tensor::{Graph, Tensor};

fn loss(w: &Tensor<f64>, x: &Tensor<f64>) -> tsg::Result<(Graph<f64>, tsg::tensor::NodeId, tsg::tensor::NodeId)> {
    let mut g = Graph::new();
    let w = g.input(w.clone())?;
    let x = g.constant(x.clone())?;
    let h = g.matmul(x, w)?;
    let h = g.tanh(h)?;
    let p = g.softmax(h, 1)?;
    let l = g.log(p)?;
    let root = g.mean(l)?;
    Ok((g, w, root))
}

fn main() -> tsg::Result<()> {
    let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]])?;
    let w = Tensor::from_rows(&[&[0.1, -0.2], &[0.4, 0.3], &[-0.5, 0.2]])?;

    let (g, w_node, root) = loss(&w, &x)?;
    let grads = g.backward(root)?;
    let analytic = grads.wrt(w_node).expect("w is an input").data()[0];

    let h = 1e-6;
    let mut up = w.clone();
    up.data_mut()[0] += h;
    let mut down = w.clone();
    down.data_mut()[0] -= h;
    let f = |t: &Tensor<f64>| loss(t, &x).map(|(g, _, r)| g.value(r).item());
    let numeric = (f(&up)? - f(&down)?) / (2.0 * h);

    println!("loss          {:.6}", g.value(root).item());
    println!("dL/dw[0,0]    {analytic:.9} (tape)");
    println!("              {numeric:.9} (central difference)");
    println!("tape nodes    {}", g.len());
    Ok(())
}
