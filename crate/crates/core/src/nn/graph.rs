use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerCache, LayerGrads, Mode};
use crate::tensor::{Real, Tensor};

/// Ordered list of concrete layers. Activation `0` is the graph input and
/// activation `i + 1` is the output of layer `i`; skip sources index into
/// this numbering.
#[derive(Clone, Debug)]
pub struct ModelGraph<S: Real = f32> {
    input_shape: [usize; 3],
    pub layers: Vec<Layer<S>>,
}

pub struct GraphCache<S: Real> {
    layers: Vec<LayerCache<S>>,
    input_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GraphGrads<S: Real> {
    pub layers: Vec<LayerGrads<S>>,
    pub input: Tensor<S>,
}

impl<S: Real> ModelGraph<S> {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer<S>>) -> Result<Self> {
        let g = Self { input_shape, layers };
        g.shapes()?;
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Per-example activation shapes, validated end to end.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input_shape];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer
                .kind
                .output_shape(shapes[i])
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.tag)))?;
            if let Some(s) = layer.skip {
                if s > i {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}): skip source {s} is not an earlier activation",
                        layer.tag
                    )));
                }
                if shapes[s] != out {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}): skip source shape {:?} differs from output {out:?}",
                        layer.tag, shapes[s]
                    )));
                }
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(*self.shapes()?.last().expect("input shape present"))
    }

    pub fn num_classes(&self) -> Result<usize> {
        let [c, h, w] = self.output_shape()?;
        Ok(c * h * w)
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let [_, c, h, w] = x.dims4();
        if x.shape().len() != 4 || [c, h, w] != self.input_shape {
            return Err(Error::Shape(format!(
                "graph expects [B, {}, {}, {}], got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, GraphCache<S>)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut needed = vec![false; n + 1];
        for l in &self.layers {
            if let Some(s) = l.skip {
                needed[s] = true;
            }
        }
        let mut kept: Vec<Option<Tensor<S>>> = vec![None; n + 1];
        if needed[0] {
            kept[0] = Some(x.clone());
        }
        let mut caches = Vec::with_capacity(n);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let residual = layer.skip.and_then(|s| kept[s].as_ref());
            let (y, cache) = layer.forward(&cur, residual, mode)?;
            if needed[i + 1] {
                kept[i + 1] = Some(y.clone());
            }
            caches.push(cache);
            cur = y;
        }
        Ok((
            cur,
            GraphCache {
                layers: caches,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn predict(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn backward(&self, cache: &GraphCache<S>, grad: &Tensor<S>) -> Result<GraphGrads<S>> {
        let n = self.layers.len();
        if cache.layers.len() != n {
            return Err(Error::Usage("graph cache does not match the graph".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n + 1];
        grads[n] = Some(grad.clone());
        let mut layer_grads = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let g = grads[i + 1]
                .take()
                .ok_or_else(|| Error::Usage(format!("no gradient reached layer {i}")))?;
            let (gx, gres, lg) = layer.backward(&cache.layers[i], &g)?;
            accumulate(&mut grads[i], gx)?;
            if let (Some(s), Some(gr)) = (layer.skip, gres) {
                accumulate(&mut grads[s], gr)?;
            }
            layer_grads.push(lg);
        }
        layer_grads.reverse();
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&cache.input_shape))
            .reshape(&cache.input_shape)?;
        Ok(GraphGrads {
            layers: layer_grads,
            input,
        })
    }

    /// All trainable tensors with a trainability flag, layer by layer.
    pub fn trainables_mut(&mut self) -> Vec<(&mut Tensor<S>, bool)> {
        self.layers.iter_mut().flat_map(|l| l.trainables_mut()).collect()
    }

    pub fn project_quantizers(&mut self) {
        self.layers.iter_mut().for_each(|l| l.project_quantizers());
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.params().iter().all(|p| p.is_finite())
                && l.buffers.iter().all(|b| b.is_finite())
        })
    }

    pub fn cast<T: Real>(&self) -> Result<ModelGraph<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.cast::<T>())
            .collect::<Result<Vec<_>>>()?;
        ModelGraph::new(self.input_shape, layers)
    }
}

impl<S: Real> GraphGrads<S> {
    /// Gradients in the order of [`ModelGraph::trainables_mut`].
    pub fn flatten(&self, graph: &ModelGraph<S>) -> Vec<Tensor<S>> {
        self.layers
            .iter()
            .zip(&graph.layers)
            .flat_map(|(g, l)| g.flatten(l))
            .collect()
    }
}

fn accumulate<S: Real>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(t) => {
            let g = g.reshape(t.shape())?;
            t.add_assign(&g)
        }
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerKind;

    fn layer(kind: LayerKind) -> Layer<f64> {
        let mut rng = rand::rngs::mock::StepRng::new(7, 13);
        Layer::new(kind.name(), kind, &mut rng).unwrap()
    }

    #[test]
    fn mismatched_chain_rejected() {
        let r = ModelGraph::new(
            [1, 4, 4],
            vec![layer(LayerKind::conv(3, 1, 1, 2)), layer(LayerKind::conv(3, 1, 3, 2))],
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn skip_shape_checked() {
        let l = layer(LayerKind::conv(3, 2, 1, 1)).with_skip(0);
        assert!(ModelGraph::new([1, 4, 4], vec![l]).is_err());
        let l = layer(LayerKind::conv(3, 1, 1, 1)).with_skip(0);
        assert!(ModelGraph::new([1, 4, 4], vec![l]).is_ok());
    }

    #[test]
    fn residual_gradient_reaches_input() {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 2.0;
        let l = Layer::with_params("c", LayerKind::conv(3, 1, 1, 1), vec![w])
            .unwrap()
            .with_skip(0);
        let mut g = ModelGraph::new([1, 2, 2], vec![l]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 12.0]);
        let grads = g.backward(&cache, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(grads.input.data(), &[3.0; 4]);
    }

    #[test]
    fn empty_graph_passes_input_through() {
        let mut g = ModelGraph::<f64>::new([1, 1, 3], vec![]).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(g.predict(&x).unwrap(), x);
    }
}
