# 形状/纹理场、相机、光线步进渲染器与编码器
