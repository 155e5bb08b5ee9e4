// Expected values computed with an independent dense implementation (double
// precision) of the same formulas; inputs are exact 16-bit dyadic rationals so
// both sides operate on identical floats.
#![allow(dead_code)]

pub const SIZES: [usize; 3] = [3, 4, 5];
pub const N: usize = 12;
pub const K: usize = 2;
pub const L: usize = 2;
pub const BETA: f64 = 0.25;
pub const Y: [f64; 12] = [-0.312164306640625, 0.310546875, -0.180877685546875, -0.81134033203125, 0.552459716796875, -0.5089111328125, -0.397308349609375, 0.97955322265625, 0.715911865234375, 0.072021484375, -0.580535888671875, 0.59271240234375];
pub const X: [f64; 12] = [0.771942138671875, 0.5220947265625, -0.886810302734375, 0.74688720703125, -0.185699462890625, -0.18994140625, -0.972381591796875, 0.66082763671875, -0.563262939453125, -0.5953369140625, 0.006500244140625, 0.05328369140625];
pub const Z: [f64; 24] = [-0.266998291015625, -0.725341796875, -0.606414794921875, -0.85699462890625, -0.703155517578125, -0.1112060546875, -0.967376708984375, 0.64874267578125, -0.777984619140625, 0.2158203125, -0.732635498046875, -0.21075439453125, -0.897735595703125, -0.2755126953125, 0.941558837890625, 0.28326416015625, -0.968658447265625, 0.383544921875, -0.601043701171875, 0.34954833984375, -0.397003173828125, 0.6617431640625, 0.483306884765625, 0.70684814453125];
pub const W: [f64; 24] = [-0.089019775390625, -0.47216796875, 0.538360595703125, 0.57391357421875, -0.450958251953125, 0.4505615234375, 0.407867431640625, -0.33050537109375, 0.610931396484375, -0.601318359375, -0.564422607421875, 0.21234130859375, -0.309600830078125, 0.8409423828125, -0.534759521484375, 0.92120361328125, -0.118804931640625, -0.25390625, 0.840606689453125, -0.98516845703125, 0.777069091796875, -0.4171142578125, 0.405426025390625, 0.21197509765625];
pub const PLAIN_AR: f64 = -0.027886504614399194;
pub const PLAIN_S: f64 = 0.12193600345505778;
pub const PLAIN_VAR: f64 = 0.007696244810693239;
pub const PLAIN_VS: f64 = 0.022703390814242025;
pub const PLAIN_C: f64 = -0.011940317842972309;
pub const PLAIN_VAR_CF: f64 = 0.003653237867192908;
pub const PLAIN_VS_CF: f64 = 0.024963308608645072;
pub const PLAIN_C_CF: f64 = 0.015017629590011154;
pub const SYM_AR: f64 = -0.03852577625473345;
pub const SYM_S: f64 = 0.19278452797042953;
pub const SYM_VAR: f64 = 0.022768980202065872;
pub const SYM_VS: f64 = 0.06542947076086449;
pub const SYM_C: f64 = -0.03469638565201752;
pub const SYM_VAR_CF: f64 = -0.0008724905643561418;
pub const SYM_VS_CF: f64 = 0.07332612349736953;
pub const SYM_C_CF: f64 = 0.06733209510454408;
pub const MC_AR: f64 = -0.2065241437086869;
pub const MC_S: f64 = 0.08334407757204941;
pub const MC_VAR: f64 = 0.11452881025480764;
pub const MC_VS: f64 = 0.032204204554910416;
pub const MC_C: f64 = -0.05035551977593578;
pub const MC_VAR_CF: f64 = 0.0947010384860894;
pub const MC_VS_CF: f64 = 0.028907668027921937;
pub const MC_C_CF: f64 = -0.06334113490611613;
pub const CLMI_STAT: f64 = 0.7121143261923379;
pub const CLMI_VAR: f64 = 0.13411390342620222;
pub const CLUSTER_AR_STAT: f64 = 2.3688090948490212;
pub const CLC_PHI1: f64 = 0.007696244810693239;
pub const CLC_PHI12: f64 = -0.029247686081931637;
pub const CLC_PHI13: f64 = 0.01565526784212863;
pub const CLC_PSI: f64 = -0.05111597890261642;
pub const CLC_UPSILON: f64 = 0.10861294084196713;
pub const F_HOMOSKEDASTIC: f64 = 2.0252092244399513;
pub const F_ROBUST: f64 = 2.9367462895953604;
pub const F_EFFECTIVE: f64 = 0.9840867482711751;
pub const MAX_LEVERAGE: f64 = 0.4878389369639387;
pub const KERNEL_PLAIN_0_5: f64 = 0.07452744951428575;
pub const KERNEL_SYM_0_5: f64 = 0.12080345117010896;
pub const KERNEL_MC_0_5: f64 = -0.08555917346963657;
pub const MC_PRE_ZERO_RESIDUAL: f64 = 1.3877787807814457e-16;

